import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec10():
    from deepi2t.grid import GridSpec

    return GridSpec(-8.68, 41.10, 200.0, 10, 10)


ACCEPTANCE_OVERRIDES = dict(synth__trips=5000, synth__days=14, synth__train_days=11, training__epochs=30)


def run_acceptance_experiment(out_dir):
    import time

    from deepi2t.config import synthetic_toy_config
    from deepi2t.pipeline import run_experiment

    t0 = time.perf_counter()
    exp = run_experiment(synthetic_toy_config(str(out_dir), seed=0, **ACCEPTANCE_OVERRIDES))
    exp.elapsed = time.perf_counter() - t0
    return exp


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """The desk-scale synthetic run (30x30 city, 5000 trips, both variants), shared across modules."""
    return run_acceptance_experiment(tmp_path_factory.mktemp("experiment"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from deepi2t.cli import build_parser, run_subcommand
from deepi2t.config import synthetic_toy_config
from deepi2t.tiles import read_archive

SUBCOMMANDS = ["preprocess", "tiles", "embed-graph", "features", "train", "evaluate", "query", "synth", "synth generate"]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert run_subcommand(cmd.split() + ["--help"]) == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_errors_exit_two(tmp_path):
    assert run_subcommand(["preprocess", "--config", "x.ini", "--bogus"]) == 2
    assert run_subcommand(["nosuch"]) == 2
    assert run_subcommand(["train"]) == 2  # --config is required


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "deepi2t.cli", *args], capture_output=True, text=True)


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[training]\nepochs = 3\nmomentum = 0.9\n")
    r = _cli("preprocess", "--config", str(p))
    assert r.returncode == 1
    assert "training.momentum" in r.stderr
    p.write_text("[training]\nepochs = three\n")
    r = _cli("train", "--config", str(p))
    assert r.returncode == 1 and "training.epochs" in r.stderr


@pytest.fixture(scope="module")
def run_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = synthetic_toy_config(
        str(root / "run"),
        seed=3,
        synth__width=10,
        synth__height=10,
        synth__trips=150,
        embedding__epochs=1,
        training__epochs=2,
    )
    cfg.evaluate.plots = False
    path = root / "run.ini"
    cfg.save(path)
    steps = [
        ["preprocess"],
        ["tiles", "render-synthetic"],
        ["embed-graph"],
        ["features"],
        ["train"],
        ["train", "--variant", "gridlstm"],
    ]
    for s in steps:
        assert run_subcommand([*s, "--config", str(path)]) == 0, s
    return cfg, path, root


def test_evaluate_without_checkpoint_names_key(run_cfg):
    _, path, _ = run_cfg
    r = _cli("evaluate", "--config", str(path))
    assert r.returncode == 1
    assert "evaluate.checkpoint" in r.stderr


def test_end_to_end_report(run_cfg):
    cfg, path, _ = run_cfg
    ck = f"{cfg.run.out_dir}/checkpoints/full.pt"
    assert run_subcommand(["evaluate", "--config", str(path), "--checkpoint", ck]) == 0
    report = f"{cfg.run.out_dir}/report"
    lines = open(f"{report}/metrics.csv").read().splitlines()
    assert lines[0] == f"# config,{cfg.config_hash()}"
    methods = {row["method"] for row in csv.DictReader(lines[1:])}
    assert {"DeepI2T", "GridLSTM", "LR", "AVG", "TEMP", "DeepI2T-blind"} <= methods
    summary = json.load(open(f"{report}/summary.json"))
    assert summary["config_hash"] == cfg.config_hash()
    hist = open(f"{cfg.run.out_dir}/checkpoints/history_full.csv").read().splitlines()
    assert hist[0].startswith("epoch,train_mape,eval_mape,wall_time") and len(hist) == 3


def test_stages_skip_when_done(run_cfg, caplog):
    _, path, _ = run_cfg
    import logging

    with caplog.at_level(logging.INFO):
        assert run_subcommand(["features", "--config", str(path)]) == 0
    assert any("skip" in r.message for r in caplog.records)


def test_artifacts_embed_hash(run_cfg):
    cfg, _, _ = run_cfg
    h = cfg.config_hash()
    _, _, head = read_archive(f"{cfg.run.out_dir}/images/layout.bin")
    assert head["config_hash"] == h
    from deepi2t.features import DriverRegistry, load_flow_table
    from deepi2t.model import load_checkpoint

    assert load_flow_table(f"{cfg.run.out_dir}/features/flow.bin").config_hash == h
    assert DriverRegistry.load(f"{cfg.run.out_dir}/features/drivers.txt").config_hash == h
    _, payload = load_checkpoint(f"{cfg.run.out_dir}/checkpoints/full.pt")
    assert payload["config_hash"] == h and payload["complete"]


def _queries(cfg, root):
    from deepi2t.ingest import read_corpus

    test = read_corpus(f"{cfg.run.out_dir}/corpus/test.tsv")
    trips = list(test)[:5]
    aware, blind = root / "aware.csv", root / "blind.csv"
    with open(aware, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "vehicle_id", "timestamp", "lon", "lat"])
        for i, t in enumerate(trips):
            for ts, lon, lat in zip(t.t, t.lon, t.lat):
                w.writerow([f"q{i}", t.vehicle_id, int(ts), f"{lon:.7f}", f"{lat:.7f}"])
    with open(blind, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "origin_lon", "origin_lat", "dest_lon", "dest_lat", "departure"])
        for i, t in enumerate(trips):
            w.writerow([f"b{i}", t.lon[0], t.lat[0], t.lon[-1], t.lat[-1], t.departure])
    return aware, blind


def test_query_modes(run_cfg):
    cfg, path, root = run_cfg
    aware, blind = _queries(cfg, root)
    ck = f"{cfg.run.out_dir}/checkpoints/full.pt"
    for mode, inp in (("aware", aware), ("blind", blind)):
        out = root / f"out_{mode}.csv"
        assert run_subcommand(["query", "--config", str(path), "--mode", mode, "--input", str(inp), "--checkpoint", ck, "--output", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 5
        vals = [float(r["estimate_s"]) for r in rows if r["estimate_s"]]
        assert vals and all(np.isfinite(v) and v > 0 for v in vals)


def test_hash_mismatch_refused_unless_forced(run_cfg, tmp_path):
    cfg, _, _ = run_cfg
    other = synthetic_toy_config(cfg.run.out_dir, **{"training__lr": 5e-4})
    for k in ("width", "height", "trips"):
        setattr(other.synth, k, getattr(cfg.synth, k))
    other.synth.seed, other.run.seed = cfg.synth.seed, cfg.run.seed
    other.embedding.epochs, other.training.epochs, other.evaluate.plots = cfg.embedding.epochs, cfg.training.epochs, False
    assert other.config_hash() != cfg.config_hash()
    p = tmp_path / "other.ini"
    other.save(p)
    ck = f"{cfg.run.out_dir}/checkpoints/full.pt"
    rep = str(tmp_path / "rep")
    r = _cli("evaluate", "--config", str(p), "--checkpoint", ck, "--report", rep)
    assert r.returncode == 1 and "hash" in r.stderr
    assert run_subcommand(["evaluate", "--config", str(p), "--checkpoint", ck, "--report", rep, "--force"]) == 0


def test_synth_generate(tmp_path):
    out = tmp_path / "city"
    assert run_subcommand(["synth", "generate", "--seed", "4", "--cells", "6x5", "--trips", "20", "--days", "2", "--out", str(out), "--png"]) == 0
    rasters, index, head = read_archive(out / "layout.bin")
    assert head["count"] == 30 and head["shape"] == (3, 54, 46)
    assert len(list((out / "cells").glob("*.png"))) == 30
    from deepi2t.ingest import read_corpus

    assert len(read_corpus(out / "trips.tsv")) == 20
    assert run_subcommand(["synth", "generate", "--cells", "50x50", "--out", str(out)]) == 1
    assert run_subcommand(["synth", "generate", "--cells", "banana", "--out", str(out)]) == 2


def test_parser_lists_all_stages():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"preprocess", "tiles", "embed-graph", "features", "train", "evaluate", "query", "synth"}

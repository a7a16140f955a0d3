"""Small builders shared by the model and training tests."""

import numpy as np
import torch

from deepi2t.features import EncodedSequence
from deepi2t.model import DeepI2T, ImageBank, ModelConfig

TINY_CELLS = 6


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        n_cells=TINY_CELLS,
        image_shape=(3, 8, 8),
        pools=(2, 2, 2),
        image_dim=200,
        line_dim=100,
        flow_rows=20,
        start_rows=50,
        driver_rows=5,
        weather_rows=3,
        lstm_hidden=8,
        residual_blocks=2,
        time_scale=100.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw) -> DeepI2T:
    torch.manual_seed(seed)
    return DeepI2T(tiny_config(**kw)).to(dtype)


def tiny_images(seed=0, n=TINY_CELLS, shape=(3, 8, 8)) -> ImageBank:
    rng = np.random.default_rng(seed)
    return ImageBank(rng.integers(0, 256, size=(n, *shape), dtype=np.uint8))


def encoded(cells, flows=None, targets=None, padded=None, start=3, driver=1, weather=0, dirs=None) -> EncodedSequence:
    n = len(cells)
    tg = np.arange(n, dtype=float) * 60.0 if targets is None else np.asarray(targets, dtype=float)
    return EncodedSequence(
        cells=np.asarray(cells, dtype=np.int64),
        directions=np.asarray(dirs if dirs is not None else [k % 12 for k in range(n)], dtype=np.int64),
        flows=np.asarray(flows if flows is not None else [1] * n, dtype=np.int64),
        targets=tg,
        supervised=~np.asarray(padded if padded is not None else [False] * n, dtype=bool),
        start_idx=start,
        driver_idx=driver,
        weather_idx=weather,
        departure=1_614_556_800,
        hour=0,
        trip_id=f"t{n}",
    )


def gradient_check_worst(n_coords=100, seed=0) -> float:
    """Worst relative error between autograd and central differences on the tiny float64 model.

    Coordinates are drawn among parameters the batch actually touches,
    since rows of unused embedding tables have trivially zero gradients.
    """
    from deepi2t.model import collate
    from deepi2t.training import batch_loss_terms

    model, bank = tiny_model(7), tiny_images(7)
    b = collate([encoded([0, 1, 2], targets=[0, 40, 95]), encoded([3, 4, 5], targets=[0, 70, 130], start=9)], torch.float64)

    def loss():
        return batch_loss_terms(model(b, bank), b).mean()

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    active = [(i, j) for i, p in enumerate(params) for j in torch.nonzero(p.grad.reshape(-1)).flatten().tolist()]
    rng = np.random.default_rng(seed)
    picks = [active[k] for k in rng.choice(len(active), size=n_coords, replace=False)]
    # step large enough to beat float64 roundoff on small gradients, small enough to rarely cross a ReLU or pooling kink
    eps, worst = 1e-4, 0.0
    with torch.no_grad():
        for i, j in picks:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss().item()
            flat[j] = orig - eps
            down = loss().item()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            ana = params[i].grad.view(-1)[j].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst

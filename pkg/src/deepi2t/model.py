"""The image-to-time network.

Per grid step a 400-dim vector is fused from: ConvNet image features gated
element-wise by a direction embedding (200), a LINE cell embedding (100), a
flow-bucket embedding (50), and start-time/driver/weather embeddings (30+10+10).
A Bi-LSTM with a residual stack maps the sequence to a cumulative travel-time
estimate for every step after the first.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .features import EMBEDDING_TABLES, EncodedSequence

CHECKPOINT_FORMAT = "deepi2t-checkpoint"
CHECKPOINT_VERSION = 1

FULL_IMAGE_SHAPE = (3, 436, 373)
# desk-scale profile: same layer stack on images ~1/8 the linear size
TOY_IMAGE_SHAPE = (3, 54, 46)


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def pool_out(n: int, k: int, s: int) -> int:
    """Ceil-mode pooling output length (no padding)."""
    out = math.ceil((n - k) / s) + 1
    if (out - 1) * s >= n:
        out -= 1
    return out


@dataclass
class ModelConfig:
    n_cells: int
    image_shape: tuple[int, int, int] = FULL_IMAGE_SHAPE
    conv_channels: tuple[int, int, int] = (8, 16, 8)
    pools: tuple[int, int, int] = (2, 3, 3)
    image_dim: int = 200
    line_dim: int = 100
    flow_rows: int = EMBEDDING_TABLES["flow"][0]
    flow_dim: int = EMBEDDING_TABLES["flow"][1]
    start_rows: int = EMBEDDING_TABLES["start_time"][0]
    start_dim: int = EMBEDDING_TABLES["start_time"][1]
    driver_rows: int = EMBEDDING_TABLES["driver"][0]
    driver_dim: int = EMBEDDING_TABLES["driver"][1]
    weather_rows: int = EMBEDDING_TABLES["weather"][0]
    weather_dim: int = EMBEDDING_TABLES["weather"][1]
    n_directions: int = EMBEDDING_TABLES["direction"][0]
    lstm_hidden: int = 128
    residual_blocks: int = 2
    residual_width: int | None = None
    ablate_image: bool = False
    time_scale: float = 600.0

    @property
    def attr_dim(self) -> int:
        return self.start_dim + self.driver_dim + self.weather_dim

    @property
    def step_dim(self) -> int:
        return self.image_dim + self.line_dim + self.flow_dim + self.attr_dim

    @property
    def width(self) -> int:
        return self.residual_width or 2 * self.lstm_hidden

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Input shape of each ConvNet layer, then the flattened FC input."""
        c, h, w = self.image_shape
        shapes = [(c, h, w)]
        for ch, k in zip(self.conv_channels, self.pools):
            shapes.append((ch, h, w))  # 3x3 same-padded conv keeps h, w
            h, w = pool_out(h, k, k), pool_out(w, k, k)
            shapes.append((ch, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_shape", "conv_channels", "pools"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("image_shape", "conv_channels", "pools"):
            d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def toy(cls, n_cells: int, **kw) -> "ModelConfig":
        base = dict(image_shape=TOY_IMAGE_SHAPE, lstm_hidden=64)
        base.update(kw)
        return cls(n_cells=n_cells, **base)


class ConvNet(nn.Module):
    """conv3x3 -> ReLU -> maxpool, three times, then one affine map to ``image_dim``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.expected = cfg.layer_shapes()
        ins = [cfg.image_shape[0]] + list(cfg.conv_channels[:-1])
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, stride=1, padding=1) for i, o in zip(ins, cfg.conv_channels))
        self.pools = nn.ModuleList(nn.MaxPool2d(k, stride=k, ceil_mode=True) for k in cfg.pools)
        c, h, w = self.expected[-1]
        self.fc = nn.Linear(c * h * w, cfg.image_dim)
        self.trace: list[tuple[int, ...]] = []

    def _check(self, x: torch.Tensor, i: int) -> None:
        got = tuple(x.shape[1:])
        self.trace.append(got)
        if got != self.expected[i]:
            raise ShapeError(f"ConvNet layer {i + 1}: expected input {self.expected[i]}, got {got}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.trace = []
        self._check(x, 0)
        i = 1
        for conv, pool in zip(self.convs, self.pools):
            x = torch.relu(conv(x))
            self._check(x, i)
            x = pool(x)
            self._check(x, i + 1)
            i += 2
        return self.fc(x.flatten(1))


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.l1 = nn.Linear(width, width)
        self.l2 = nn.Linear(width, width)

    def forward(self, x):
        return torch.relu(x + self.l2(torch.relu(self.l1(x))))


@dataclass
class Batch:
    cells: torch.Tensor
    directions: torch.Tensor
    flows: torch.Tensor
    targets: torch.Tensor
    supervised: torch.Tensor
    lengths: torch.Tensor
    start: torch.Tensor
    driver: torch.Tensor
    weather: torch.Tensor

    def __len__(self) -> int:
        return int(self.lengths.numel())


def collate(items: Sequence[EncodedSequence], dtype=torch.float32) -> Batch:
    B = len(items)
    Lm = max(len(e) for e in items)
    cells = np.zeros((B, Lm), dtype=np.int64)
    dirs = np.zeros((B, Lm), dtype=np.int64)
    flows = np.zeros((B, Lm), dtype=np.int64)
    targets = np.zeros((B, Lm))
    sup = np.zeros((B, Lm), dtype=bool)
    for i, e in enumerate(items):
        n = len(e)
        cells[i, :n] = e.cells
        dirs[i, :n] = e.directions
        flows[i, :n] = e.flows
        targets[i, :n] = e.targets
        sup[i, :n] = e.supervised
    return Batch(
        cells=torch.from_numpy(cells),
        directions=torch.from_numpy(dirs),
        flows=torch.from_numpy(flows),
        targets=torch.from_numpy(targets).to(dtype),
        supervised=torch.from_numpy(sup),
        lengths=torch.tensor([len(e) for e in items], dtype=torch.int64),
        start=torch.tensor([e.start_idx for e in items], dtype=torch.int64),
        driver=torch.tensor([e.driver_idx for e in items], dtype=torch.int64),
        weather=torch.tensor([e.weather_idx for e in items], dtype=torch.int64),
    )


class ImageBank:
    """Per-cell layout rasters (uint8, C x H x W) indexed by cell index."""

    def __init__(self, pixels: np.ndarray, shape: tuple[int, int, int] | None = None):
        if pixels.ndim != 4:
            raise ShapeError(f"image bank must be 4-d (cells, C, H, W), got {pixels.shape}")
        if shape is not None and tuple(pixels.shape[1:]) != tuple(shape):
            raise ShapeError(f"layout images must be {tuple(shape)}, got {tuple(pixels.shape[1:])}")
        self.pixels = pixels

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def get(self, idx: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        arr = np.asarray(self.pixels[idx.numpy()])
        return torch.from_numpy(arr.astype(np.float32) / 255.0).to(dtype)


def _embedding(rows: int, dim: int) -> nn.Embedding:
    e = nn.Embedding(rows, dim)
    nn.init.uniform_(e.weight, -0.05, 0.05)
    return e


class DeepI2T(nn.Module):
    def __init__(self, cfg: ModelConfig, line_init: np.ndarray | None = None):
        super().__init__()
        self.cfg = cfg
        self.convnet = ConvNet(cfg)
        self.direction = _embedding(cfg.n_directions, cfg.image_dim)
        self.line = _embedding(cfg.n_cells, cfg.line_dim)
        if line_init is not None:
            if line_init.shape != (cfg.n_cells, cfg.line_dim):
                raise ShapeError(f"LINE init must be {(cfg.n_cells, cfg.line_dim)}, got {line_init.shape}")
            with torch.no_grad():
                self.line.weight.copy_(torch.as_tensor(line_init, dtype=self.line.weight.dtype))
        self.flow = _embedding(cfg.flow_rows, cfg.flow_dim)
        self.start_time = _embedding(cfg.start_rows, cfg.start_dim)
        self.driver = _embedding(cfg.driver_rows, cfg.driver_dim)
        self.weather = _embedding(cfg.weather_rows, cfg.weather_dim)
        self.lstm = nn.LSTM(cfg.step_dim, cfg.lstm_hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Identity() if cfg.width == 2 * cfg.lstm_hidden else nn.Linear(2 * cfg.lstm_hidden, cfg.width)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.width) for _ in range(cfg.residual_blocks))
        self.head = nn.Linear(cfg.width, 1)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def image_features(self, images: ImageBank, cells: torch.Tensor) -> torch.Tensor:
        """ConvNet output for each (unique) cell index in ``cells``."""
        if images.shape != tuple(self.cfg.image_shape):
            raise ShapeError(f"expected layout images {tuple(self.cfg.image_shape)}, got {images.shape}")
        return self.convnet(images.get(cells, self.dtype))

    def step_vectors(self, batch: Batch, images: ImageBank | None, image_cache: torch.Tensor | None = None) -> torch.Tensor:
        B, Lm = batch.cells.shape
        if self.cfg.ablate_image:
            img = torch.zeros(B, Lm, self.cfg.image_dim, dtype=self.dtype)
        else:
            if image_cache is not None:
                feats = image_cache[batch.cells]
            else:
                uniq, inv = torch.unique(batch.cells, return_inverse=True)
                feats = self.image_features(images, uniq)[inv]
            img = feats * self.direction(batch.directions)
        attrs = torch.cat([self.start_time(batch.start), self.driver(batch.driver), self.weather(batch.weather)], dim=-1)
        return torch.cat(
            [img, self.line(batch.cells), self.flow(batch.flows), attrs.unsqueeze(1).expand(B, Lm, -1)],
            dim=-1,
        )

    def forward(self, batch: Batch, images: ImageBank | None = None, image_cache: torch.Tensor | None = None) -> torch.Tensor:
        """Estimates for steps 2..L as a ``(B, Lmax - 1)`` tensor (fill positions are junk)."""
        if int(batch.lengths.min()) < 2:
            raise ValueError("every sequence needs at least 2 steps")
        x = self.step_vectors(batch, images, image_cache)
        packed = pack_padded_sequence(x, batch.lengths, batch_first=True, enforce_sorted=False)
        h, _ = self.lstm(packed)
        h, _ = pad_packed_sequence(h, batch_first=True, total_length=x.shape[1])
        h = self.proj(h)
        for blk in self.blocks:
            h = blk(h)
        out = self.head(h).squeeze(-1) * self.cfg.time_scale
        out = out[:, 1:]
        valid = torch.arange(out.shape[1]).unsqueeze(0) < (batch.lengths - 1).unsqueeze(1)
        bad = valid & ~torch.isfinite(out)
        if bool(bad.any()):
            i, j = (int(v) for v in torch.nonzero(bad)[0])
            raise NumericError(f"non-finite estimate in sequence {i} at step {j + 2}")
        return out

    def final_estimates(self, batch: Batch, images=None, image_cache=None) -> torch.Tensor:
        out = self.forward(batch, images, image_cache)
        return out.gather(1, (batch.lengths - 2).unsqueeze(1)).squeeze(1)

    def all_image_features(self, images: ImageBank, chunk: int = 256) -> torch.Tensor:
        feats = []
        with torch.no_grad():
            for s in range(0, len(images), chunk):
                feats.append(self.image_features(images, torch.arange(s, min(s + chunk, len(images)))))
        return torch.cat(feats)


def ablate_gridlstm(cfg: ModelConfig) -> ModelConfig:
    """GridLSTM: the image-times-direction slot is zeroed, everything else unchanged."""
    return replace(cfg, ablate_image=True)


def save_checkpoint(path: str | Path, model: DeepI2T, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[DeepI2T, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = DeepI2T(cfg)
    sd = payload["state_dict"]
    model.to(next(iter(sd.values())).dtype)
    model.load_state_dict(sd)
    return model, payload

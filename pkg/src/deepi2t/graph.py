"""Grid proximity network and LINE node embeddings."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .grid import GridSpec

log = logging.getLogger(__name__)

MAX_HOPS = 5
EMBED_MAGIC = b"DI2TEMB\x00"
EMBED_VERSION = 1


class LineDivergenceError(RuntimeError):
    pass


@dataclass
class GridGraph:
    """Undirected weighted graph; each unordered edge is stored once with ``src < dst``."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    spec: GridSpec | None = None

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes) + np.bincount(self.dst, minlength=self.n_nodes)

    def weighted_degree(self) -> np.ndarray:
        return np.bincount(self.src, self.weight, self.n_nodes) + np.bincount(self.dst, self.weight, self.n_nodes)

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(int(u), int(v)): float(w) for u, v, w in zip(self.src, self.dst, self.weight)}


def build_graph(spec: GridSpec, max_hops: int = MAX_HOPS) -> GridGraph:
    """Connect every pair of cells within ``max_hops`` Manhattan hops, weight 1/hops."""
    W, H = spec.width, spec.height
    cols, rows = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    src, dst, wts = [], [], []
    for dx in range(0, max_hops + 1):
        for dy in range(-max_hops, max_hops + 1):
            d = dx + abs(dy)
            if d == 0 or d > max_hops or (dx == 0 and dy <= 0):
                continue
            c2, r2 = cols + dx, rows + dy
            ok = (c2 < W) & (r2 >= 0) & (r2 < H)
            u = spec.cell_index(cols[ok], rows[ok])
            v = spec.cell_index(c2[ok], r2[ok])
            src.append(np.minimum(u, v))
            dst.append(np.maximum(u, v))
            wts.append(np.full(u.size, 1.0 / d))
    if src:
        s, t, w = np.concatenate(src), np.concatenate(dst), np.concatenate(wts)
        order = np.lexsort((t, s))
        s, t, w = s[order], t[order], w[order]
    else:
        s = t = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    return GridGraph(spec.n_cells, s.astype(np.int64), t.astype(np.int64), w, spec)


@dataclass
class LineConfig:
    dim: int = 100
    order: int = 2
    epochs: int = 10
    negatives: int = 5
    lr: float = 0.025
    samples_per_epoch: int | None = None
    seed: int = 0


@dataclass
class NodeEmbedding:
    vectors: np.ndarray
    context: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def train_line(graph: GridGraph, config: LineConfig | None = None, **overrides) -> NodeEmbedding:
    """LINE via weighted edge sampling and negative sampling.

    Second order keeps a separate context table; first order shares one table.
    The learning rate decays linearly over all samples. Single-threaded, so a
    fixed seed reproduces the embedding exactly.
    """
    cfg = config or LineConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    if cfg.dim <= 0:
        raise ValueError("dim must be positive")
    if cfg.order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    rng = np.random.default_rng(cfg.seed)
    n = graph.n_nodes
    emb = (rng.random((n, cfg.dim)) - 0.5) / cfg.dim
    ctx = np.zeros((n, cfg.dim)) if cfg.order == 2 else emb
    result = NodeEmbedding(emb, ctx if cfg.order == 2 else None)
    if graph.n_edges == 0 or cfg.epochs == 0:
        return result

    # both directions of every undirected edge
    esrc = np.concatenate([graph.src, graph.dst])
    edst = np.concatenate([graph.dst, graph.src])
    ew = np.concatenate([graph.weight, graph.weight])
    edge_p = ew / ew.sum()
    noise = graph.weighted_degree() ** 0.75
    noise_p = noise / noise.sum()

    per_epoch = cfg.samples_per_epoch or esrc.size
    total = per_epoch * cfg.epochs
    for epoch in range(cfg.epochs):
        picks = rng.choice(esrc.size, size=per_epoch, p=edge_p)
        negs = rng.choice(n, size=(per_epoch, cfg.negatives), p=noise_p).astype(np.int64)
        step = epoch * per_epoch + np.arange(per_epoch)
        lrs = cfg.lr * np.maximum(1.0 - step / total, 1e-4)
        loss = _kernels.line_sgd_epoch(emb, ctx, esrc[picks], edst[picks], negs, lrs, cfg.order == 1)
        if not np.isfinite(loss) or not np.all(np.isfinite(emb)):
            raise LineDivergenceError(
                f"LINE diverged at epoch {epoch}: loss={loss}, max finite |emb|={np.max(np.abs(emb[np.isfinite(emb)]), initial=0.0):.3g}, lr0={cfg.lr}"
            )
        result.loss_trace.append(float(loss))
        log.debug("LINE epoch %d loss %.5f", epoch, loss)
    return result


def cosine_matrix_pairs(vectors: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    a, b = vectors[u], vectors[v]
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-300)


# embedding file: header, then one (col, row, dim x float64) record per node

_HEADER = struct.Struct("<8sI16sII")


def save_embedding(path: str | Path, emb: NodeEmbedding, spec: GridSpec, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dim = emb.vectors.shape
    rec = np.dtype([("col", "<i4"), ("row", "<i4"), ("v", "<f8", (dim,))])
    arr = np.empty(n, dtype=rec)
    idx = np.arange(n)
    arr["col"], arr["row"] = idx // spec.height, idx % spec.height
    arr["v"] = emb.vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, config_hash.encode().ljust(16, b"\0")[:16], n, dim))
        fh.write(arr.tobytes())


def load_embedding(path: str | Path, spec: GridSpec | None = None) -> tuple[np.ndarray, str]:
    """Return ``(vectors in cell-index order, config hash)``."""
    raw = Path(path).read_bytes()
    magic, version, chash, n, dim = _HEADER.unpack_from(raw)
    if magic != EMBED_MAGIC or version != EMBED_VERSION:
        raise ValueError(f"{path}: not a version-{EMBED_VERSION} embedding file")
    rec = np.dtype([("col", "<i4"), ("row", "<i4"), ("v", "<f8", (dim,))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    out = np.empty((n, dim))
    if spec is not None:
        if n != spec.n_cells:
            raise ValueError(f"embedding has {n} nodes, grid has {spec.n_cells}")
        out[spec.cell_index(arr["col"].astype(np.int64), arr["row"].astype(np.int64))] = arr["v"]
    else:
        out[:] = arr["v"]
    return out, chash.rstrip(b"\0").decode()

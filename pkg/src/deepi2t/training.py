"""Weighted multitask MAPE objective and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .features import EncodedSequence
from .model import Batch, DeepI2T, ImageBank, collate, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def multitask_weights(L: int) -> np.ndarray:
    """Weights for sub-paths ending at steps 2..L: ``2l / (L^2 + L - 2)``."""
    if L < 2:
        raise ValueError("sequence length must be at least 2")
    l = np.arange(2, L + 1, dtype=np.float64)
    return 2.0 * l / (L * L + L - 2)


def _weight_grid(lengths: torch.Tensor, width: int, dtype) -> torch.Tensor:
    l = torch.arange(2, width + 2, dtype=dtype).unsqueeze(0)
    L = lengths.to(dtype).unsqueeze(1)
    return 2.0 * l / (L * L + L - 2.0)


def batch_loss_terms(est: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Per-sequence multitask loss, shape ``(B,)``.

    Only real (non-bridged) steps are supervised; their weights are
    renormalized to sum to one and averaged over the supervised count, which
    reduces to the plain objective when nothing is masked.
    """
    labels = batch.targets[:, 1:].to(est.dtype)
    width = est.shape[1]
    in_seq = torch.arange(width).unsqueeze(0) < (batch.lengths - 1).unsqueeze(1)
    mask = in_seq & batch.supervised[:, 1:]
    if bool((mask & (labels <= 0)).any()):
        raise ValueError("supervised labels must be positive")
    w = _weight_grid(batch.lengths, width, est.dtype) * mask
    w = w / w.sum(dim=1, keepdim=True)
    safe = torch.where(mask, labels, torch.ones_like(labels))
    ape = torch.where(mask, (est - safe).abs() / safe, torch.zeros_like(est))
    return (w * ape).sum(dim=1) / mask.sum(dim=1).to(est.dtype)


def multitask_loss(estimates, labels, mask=None) -> float:
    """Loss of one sequence given estimates and labels for steps 2..L.

    ``mask`` (optional, same length) marks supervised steps.
    """
    est = torch.as_tensor(np.asarray(estimates, dtype=np.float64)).unsqueeze(0)
    lab = np.asarray(labels, dtype=np.float64)
    n = lab.size
    sup = np.ones(n + 1, dtype=bool)
    if mask is not None:
        sup[1:] = np.asarray(mask, dtype=bool)
    batch = Batch(
        cells=torch.zeros(1, n + 1, dtype=torch.int64),
        directions=torch.zeros(1, n + 1, dtype=torch.int64),
        flows=torch.zeros(1, n + 1, dtype=torch.int64),
        targets=torch.from_numpy(np.concatenate([[0.0], lab])).unsqueeze(0),
        supervised=torch.from_numpy(sup).unsqueeze(0),
        lengths=torch.tensor([n + 1]),
        start=torch.zeros(1, dtype=torch.int64),
        driver=torch.zeros(1, dtype=torch.int64),
        weather=torch.zeros(1, dtype=torch.int64),
    )
    return float(batch_loss_terms(est, batch)[0])


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    clip: float = 5.0
    seed: int = 0
    patience: int = 5
    checkpoint_every: int = 1
    bucket_batches: int = 50
    threads: int = 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_mape: float
    eval_mape: float
    wall_time: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_eval_mape: float

    def metrics(self) -> list[tuple]:
        return [(r.epoch, r.train_loss, r.train_mape, r.eval_mape) for r in self.history]


def epoch_batches(n_items: int, lengths: np.ndarray, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Shuffled, length-bucketed minibatch index lists, reproducible per (seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(n_items)
    chunk = cfg.batch_size * cfg.bucket_batches
    batches = []
    for s in range(0, n_items, chunk):
        part = order[s : s + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i : i + cfg.batch_size] for i in range(0, part.size, cfg.batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def predict_final(model: DeepI2T, items: Sequence[EncodedSequence], images: ImageBank | None, batch_size: int = 256) -> np.ndarray:
    """Whole-trip estimates for each sequence (inference mode, image features cached)."""
    if not items:
        return np.zeros(0)
    model.eval()
    cache = None if model.cfg.ablate_image else model.all_image_features(images)
    out = np.empty(len(items))
    lengths = np.array([len(e) for e in items])
    order = np.argsort(lengths, kind="stable")
    with torch.no_grad():
        for s in range(0, len(items), batch_size):
            idx = order[s : s + batch_size]
            b = collate([items[i] for i in idx], model.dtype)
            out[idx] = model.final_estimates(b, images, cache).double().numpy()
    return out


def mape_percent(est: np.ndarray, items: Sequence[EncodedSequence]) -> float:
    truth = np.array([e.targets[-1] for e in items])
    return float(np.mean(np.abs(est - truth) / truth) * 100.0)


def train(
    model: DeepI2T,
    train_items: Sequence[EncodedSequence],
    eval_items: Sequence[EncodedSequence],
    images: ImageBank | None,
    cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    max_epochs: int | None = None,
    extra_state: dict | None = None,
) -> TrainResult:
    """Minibatch Adam on the multitask loss with early stopping on eval MAPE.

    The model ends up holding the best-on-eval parameters. With
    ``checkpoint_path`` set, a resumable checkpoint is written every
    ``checkpoint_every`` epochs; ``resume_from`` continues such a run exactly.
    ``max_epochs`` stops after that many epochs in this call (for resume tests).
    """
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: list[EpochRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    best_eval, best_epoch, stale, start = float("inf"), -1, 0, 0

    if resume_from is not None:
        _, payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        tr = payload["training"]
        history = [EpochRecord(**r) for r in tr["history"]]
        best_state, best_eval, best_epoch, stale = tr["best_state"], tr["best_eval"], tr["best_epoch"], tr["stale"]
        start = tr["epoch"] + 1

    lengths = np.array([len(e) for e in train_items])
    stop_at = cfg.epochs if max_epochs is None else min(cfg.epochs, start + max_epochs)
    for epoch in range(start, stop_at):
        if stale >= cfg.patience:
            break
        t0 = time.perf_counter()
        model.train()
        losses, sizes = [], []
        for idx in epoch_batches(len(train_items), lengths, cfg, epoch):
            batch = collate([train_items[i] for i in idx], model.dtype)
            loss = batch_loss_terms(model(batch, images), batch).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last good checkpoint: {checkpoint_path or 'none'}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
            opt.step()
            losses.append(loss.item())
            sizes.append(len(idx))
        train_mape = mape_percent(predict_final(model, train_items, images), train_items)
        eval_mape = mape_percent(predict_final(model, eval_items, images), eval_items) if eval_items else float("nan")
        rec = EpochRecord(epoch + 1, float(np.average(losses, weights=sizes)), train_mape, eval_mape, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.4f train MAPE %.2f%% eval MAPE %.2f%%", rec.epoch, rec.train_loss, train_mape, eval_mape)
        score = eval_mape if eval_items else train_mape
        if score < best_eval:
            best_eval, best_epoch, stale = score, rec.epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if checkpoint_path is not None and (rec.epoch % cfg.checkpoint_every == 0 or epoch == stop_at - 1):
            save_checkpoint(
                checkpoint_path,
                model,
                optimizer=opt.state_dict(),
                training={
                    "epoch": epoch,
                    "history": [asdict(r) for r in history],
                    "best_state": best_state,
                    "best_eval": best_eval,
                    "best_epoch": best_epoch,
                    "stale": stale,
                    "config": asdict(cfg),
                },
                **(extra_state or {}),
            )

    model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_eval)


def write_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mape", "eval_mape", "wall_time", "train_loss"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_mape:.6f}", f"{r.eval_mape:.6f}", f"{r.wall_time:.3f}", f"{r.train_loss:.6f}"])

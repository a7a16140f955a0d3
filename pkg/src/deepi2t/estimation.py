"""Trip queries, neighbor-based estimators, baselines and error metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import EncodedSequence, StepEncoder
from .grid import CellId, GridSequence, GridSpec, build_sequence, locate
from .ingest import Trajectory
from .model import DeepI2T, ImageBank
from .training import predict_final

log = logging.getLogger(__name__)

SR_THRESHOLD = 0.10
DEFAULT_NEIGHBOR_CAP = 50
TIME_BUCKETS = (0, 300, 600, 900, 1200, 1800, np.inf)


class NoNeighborsError(LookupError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mape: float
    sr: float
    n: int

    def as_row(self) -> dict:
        return {"MAE": self.mae, "MAPE": self.mape, "SR": self.sr, "N": self.n}


def compute_metrics(truth, estimate) -> MetricsReport:
    """MAE in seconds, MAPE and SR in percent; SR counts relative error <= 10%."""
    T = np.asarray(truth, dtype=np.float64)
    E = np.asarray(estimate, dtype=np.float64)
    if T.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    if np.any(T <= 0):
        raise ValueError("true travel times must be positive")
    err = np.abs(T - E)
    ape = err / T
    return MetricsReport(
        mae=float(err.mean()),
        mape=float(ape.mean() * 100.0),
        sr=float(np.mean(ape <= SR_THRESHOLD * (1 + 1e-12)) * 100.0),
        n=int(T.size),
    )


def breakdown(truth, estimate, keys) -> list[tuple]:
    """Metrics per key value (e.g. departure hour); counts partition the set."""
    T, E, K = np.asarray(truth, float), np.asarray(estimate, float), np.asarray(keys)
    rows = []
    for k in np.unique(K):
        m = K == k
        r = compute_metrics(T[m], E[m])
        rows.append((k.item() if hasattr(k, "item") else k, r.n, r.mae, r.mape, r.sr))
    return rows


def time_bucket(travel_time) -> np.ndarray:
    edges = np.asarray(TIME_BUCKETS[1:-1])
    return np.searchsorted(edges, np.asarray(travel_time, dtype=float), side="right")


# ---------------------------------------------------------------------------
# trips as OD pairs
# ---------------------------------------------------------------------------


def od_l1_m(spec: GridSpec, lon0, lat0, lon1, lat1) -> float:
    """Manhattan distance in projected meters between origin and destination."""
    x0, y0 = spec.project(lon0, lat0)
    x1, y1 = spec.project(lon1, lat1)
    return float(np.abs(x1 - x0) + np.abs(y1 - y0))


@dataclass
class TripQuery:
    kind: str
    trip_id: str = ""
    vehicle_id: str = ""
    trajectory: Trajectory | None = None
    origin: tuple[float, float] | None = None
    destination: tuple[float, float] | None = None
    departure: int | None = None

    @classmethod
    def path_aware(cls, traj: Trajectory, trip_id: str = "") -> "TripQuery":
        if len(traj) < 2:
            raise ValueError("path-aware query needs at least 2 footprints")
        return cls("aware", trip_id or traj.trip_id, traj.vehicle_id, trajectory=traj, departure=traj.departure)

    @classmethod
    def path_blind(cls, origin, destination, departure: int, vehicle_id: str = "", trip_id: str = "") -> "TripQuery":
        return cls("blind", trip_id, vehicle_id, origin=tuple(origin), destination=tuple(destination), departure=int(departure))

    @classmethod
    def blind_from(cls, traj: Trajectory) -> "TripQuery":
        return cls.path_blind(
            (float(traj.lon[0]), float(traj.lat[0])),
            (float(traj.lon[-1]), float(traj.lat[-1])),
            traj.departure,
            traj.vehicle_id,
            traj.trip_id,
        )


@dataclass
class TripRecord:
    trip_id: str
    origin: CellId
    destination: CellId
    l1: float
    travel_time: float
    departure: int
    hour: int
    seq: GridSequence | None = None
    enc: EncodedSequence | None = None

    @property
    def speed(self) -> float:
        return self.l1 / self.travel_time


def trip_record(traj: Trajectory, spec: GridSpec, hour: int, seq=None, enc=None) -> TripRecord:
    return TripRecord(
        traj.trip_id,
        locate(spec, traj.lon[0], traj.lat[0]),
        locate(spec, traj.lon[-1], traj.lat[-1]),
        od_l1_m(spec, traj.lon[0], traj.lat[0], traj.lon[-1], traj.lat[-1]),
        float(traj.t[-1] - traj.t[0]),
        traj.departure,
        hour,
        seq,
        enc,
    )


class NeighborIndex:
    """Training trips keyed by (origin cell, destination cell)."""

    def __init__(self, records: Sequence[TripRecord], spec: GridSpec):
        self.records = [r for r in records if r.l1 > 0 and r.travel_time > 0]
        self.spec = spec
        self.by_od: dict[tuple[CellId, CellId], list[int]] = {}
        for i, r in enumerate(self.records):
            self.by_od.setdefault((r.origin, r.destination), []).append(i)

    def __len__(self) -> int:
        return len(self.records)

    def _around(self, c: CellId) -> list[CellId]:
        return [
            CellId(c.col + dc, c.row + dr)
            for dc in (-1, 0, 1)
            for dr in (-1, 0, 1)
            if self.spec.contains((c.col + dc, c.row + dr))
        ]

    def lookup(self, origin: CellId, destination: CellId) -> tuple[list[int], bool]:
        """Exact OD match first; otherwise one round of 8-neighborhood expansion.

        Returns ``(record ids, expanded)``; raises ``NoNeighborsError``.
        """
        exact = self.by_od.get((origin, destination))
        if exact:
            return list(exact), False
        ids = []
        for o in self._around(origin):
            for d in self._around(destination):
                ids.extend(self.by_od.get((o, d), ()))
        if not ids:
            raise NoNeighborsError(f"no training trips near OD {tuple(origin)} -> {tuple(destination)}")
        return sorted(ids), True


def combine_neighbor_estimates(l_test: float, l_neighbors, t_neighbors) -> float:
    """Distance-ratio-scaled mean of neighbor estimates."""
    L = np.asarray(l_neighbors, dtype=np.float64)
    T = np.asarray(t_neighbors, dtype=np.float64)
    if L.size == 0:
        raise NoNeighborsError("no neighbors to combine")
    return float(np.mean(l_test / L * T))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


class LinearRegressionBaseline:
    """Ordinary least squares ``T = a * L + b`` on OD Manhattan distance."""

    def __init__(self):
        self.a = self.b = None

    def fit(self, l1, travel_time) -> "LinearRegressionBaseline":
        x = np.asarray(l1, dtype=np.float64)
        y = np.asarray(travel_time, dtype=np.float64)
        if x.size < 2:
            raise ValueError("need at least two training trips")
        xm, ym = x.mean(), y.mean()
        sxx = np.sum((x - xm) ** 2)
        if sxx <= 0:
            raise ValueError("degenerate design: all distances are equal")
        self.a = float(np.sum((x - xm) * (y - ym)) / sxx)
        self.b = float(ym - self.a * xm)
        return self

    def predict(self, l1):
        return self.a * np.asarray(l1, dtype=np.float64) + self.b


class NeighborAverageBaseline:
    """Query distance over the mean historical speed of OD neighbors."""

    def __init__(self, index: NeighborIndex):
        self.index = index

    def predict(self, origin: CellId, destination: CellId, l_test: float, hour: int | None = None) -> float:
        ids, _ = self.index.lookup(origin, destination)
        speeds = np.array([self.index.records[i].speed for i in ids])
        return float(l_test / speeds.mean())


class TemporalNeighborBaseline:
    """Neighbor speeds rescaled by the citywide mean speed of the query vs neighbor departure hour."""

    def __init__(self, index: NeighborIndex):
        self.index = index
        hours = np.array([r.hour for r in index.records])
        speeds = np.array([r.speed for r in index.records])
        overall = float(speeds.mean()) if speeds.size else 1.0
        self.reference = np.full(24, overall)
        self.fallback_hours: set[int] = set()
        for h in range(24):
            m = hours == h
            if m.any():
                self.reference[h] = speeds[m].mean()
            else:
                self.fallback_hours.add(h)
        if self.fallback_hours:
            log.info("TEMP: hours %s have no trips, using the all-hours mean", sorted(self.fallback_hours))

    def predict(self, origin: CellId, destination: CellId, l_test: float, hour: int) -> float:
        ids, _ = self.index.lookup(origin, destination)
        recs = [self.index.records[i] for i in ids]
        scaled = np.array([r.speed * self.reference[hour] / self.reference[r.hour] for r in recs])
        return float(l_test / scaled.mean())


# ---------------------------------------------------------------------------
# model-backed estimation
# ---------------------------------------------------------------------------


@dataclass
class Estimator:
    """A trained network plus everything needed to featurize queries."""

    model: DeepI2T
    encoder: StepEncoder
    images: ImageBank | None
    _cache: object = field(default=None, repr=False)

    @property
    def spec(self) -> GridSpec:
        return self.encoder.spec

    def encode_path(self, traj: Trajectory) -> tuple[GridSequence, EncodedSequence]:
        seq = build_sequence(traj, self.spec)
        return seq, self.encoder.encode(seq, trip_id=traj.trip_id)

    def predict_encoded(self, items: Sequence[EncodedSequence]) -> np.ndarray:
        return predict_final(self.model, items, self.images)

    def estimate_path_aware(self, query: TripQuery | Trajectory) -> float:
        traj = query.trajectory if isinstance(query, TripQuery) else query
        _, enc = self.encode_path(traj)
        return float(self.predict_encoded([enc])[0])

    def _blind_plan(self, query: TripQuery, index: NeighborIndex, cap: int, rng) -> tuple[float, list[TripRecord]]:
        o = locate(self.spec, *query.origin)
        d = locate(self.spec, *query.destination)
        if o == d:
            raise ValueError("path-blind query needs distinct origin and destination cells")
        ids, _ = index.lookup(o, d)
        if len(ids) > cap:
            ids = sorted(rng.choice(ids, size=cap, replace=False).tolist())
        l_test = od_l1_m(self.spec, *query.origin, *query.destination)
        return l_test, [index.records[i] for i in ids]

    def estimate_path_blind(self, query: TripQuery, index: NeighborIndex, cap: int = DEFAULT_NEIGHBOR_CAP, seed: int = 0) -> float:
        """Re-date neighbor trips to the query departure, estimate each, combine by distance ratio."""
        return float(self.estimate_path_blind_many([query], index, cap, seed)[0][0])

    def estimate_path_blind_many(
        self, queries: Sequence[TripQuery], index: NeighborIndex, cap: int = DEFAULT_NEIGHBOR_CAP, seed: int = 0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Estimates (NaN where no neighbors exist) and the per-query neighbor counts."""
        rng = np.random.default_rng(seed)
        plans = []
        batch: list[EncodedSequence] = []
        for q in queries:
            try:
                l_test, recs = self._blind_plan(q, index, cap, rng)
            except NoNeighborsError:
                plans.append(None)
                continue
            start = len(batch)
            for r in recs:
                batch.append(self.encoder.redate(r.enc, q.departure, r.seq))
            plans.append((l_test, [r.l1 for r in recs], start, len(batch)))
        est = self.predict_encoded(batch) if batch else np.zeros(0)
        out = np.full(len(queries), np.nan)
        counts = np.zeros(len(queries), dtype=np.int64)
        for i, p in enumerate(plans):
            if p is None:
                if len(queries) == 1:
                    raise NoNeighborsError("no neighboring training trips for this query")
                continue
            l_test, ls, s, e = p
            out[i] = combine_neighbor_estimates(l_test, ls, est[s:e])
            counts[i] = e - s
        return out, counts


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_report(out_dir: str | Path, results: dict[str, dict], config_hash: str = "", plots: bool = True) -> None:
    """Write predictions, aggregate metrics, per-hour and per-travel-time tables.

    ``results`` maps method name to ``{"trip_id", "T", "T_hat", "hour"}`` arrays.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "trip_id", "T", "T_hat", "ape"])
        for m, r in results.items():
            for tid, t, e in zip(r["trip_id"], r["T"], r["T_hat"]):
                w.writerow([m, tid, f"{t:.3f}", f"{e:.3f}", f"{abs(t - e) / t:.6f}"])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# config", config_hash])
        w.writerow(["method", "MAE", "MAPE", "SR", "N"])
        for m, r in results.items():
            rep = compute_metrics(r["T"], r["T_hat"])
            w.writerow([m, f"{rep.mae:.4f}", f"{rep.mape:.4f}", f"{rep.sr:.4f}", rep.n])
    for name, keyfn in (("per_hour", lambda r: r["hour"]), ("per_time_bucket", lambda r: time_bucket(r["T"]))):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "key", "N", "MAE", "MAPE", "SR"])
            for m, r in results.items():
                for k, n, mae, mape, sr in breakdown(r["T"], r["T_hat"], keyfn(r)):
                    w.writerow([m, k, n, f"{mae:.4f}", f"{mape:.4f}", f"{sr:.4f}"])
    if plots:
        _plot_breakdowns(out, results)


def _plot_breakdowns(out: Path, results: dict[str, dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, keyfn, xlabel in (
        ("per_hour", lambda r: r["hour"], "departure hour"),
        ("per_time_bucket", lambda r: time_bucket(r["T"]), "travel-time bucket"),
    ):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for m, r in results.items():
            rows = breakdown(r["T"], r["T_hat"], keyfn(r))
            ax.plot([x[0] for x in rows], [x[3] for x in rows], marker="o", label=m)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("MAPE (%)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=100)
        plt.close(fig)

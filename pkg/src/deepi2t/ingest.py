"""Trajectory parsing, labeling, cleaning and date splitting.

Two raw inputs are understood: the public Porto taxi CSV (one trip per row,
polyline of ``[lon, lat]`` pairs sampled every 15 s) and a generic long-format
CSV with one footprint per row (``trip_id, vehicle_id, timestamp, lon, lat``).
Trips are persisted in a canonical tab-separated text format, one trip per
line, so preprocessing can be resumed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .geo import haversine_path_km

log = logging.getLogger(__name__)

PORTO_INTERVAL_S = 15
RECORD_VERSION = 1
CORPUS_MAGIC = "#deepi2t-corpus"
PORTO_COLUMNS = (
    "TRIP_ID",
    "CALL_TYPE",
    "ORIGIN_CALL",
    "ORIGIN_STAND",
    "TAXI_ID",
    "TIMESTAMP",
    "DAY_TYPE",
    "MISSING_DATA",
    "POLYLINE",
)


class ParseError(ValueError):
    """A raw record could not be parsed."""

    def __init__(self, message: str, row_index: int | None = None):
        self.row_index = row_index
        prefix = f"row {row_index}: " if row_index is not None else ""
        super().__init__(prefix + message)


class RowRejected(ParseError):
    """A well-formed record that is unusable (flagged incomplete, empty path)."""


class Footprint(NamedTuple):
    t: int
    lon: float
    lat: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    vehicle_id: str
    t: np.ndarray
    lon: np.ndarray
    lat: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        lon = np.asarray(self.lon, dtype=np.float64)
        lat = np.asarray(self.lat, dtype=np.float64)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("trajectory needs at least one footprint")
        if not (t.shape == lon.shape == lat.shape):
            raise ValueError("t, lon, lat must have equal length")
        if np.any(np.diff(t) < 0):
            raise ValueError("footprint timestamps must be non-decreasing")
        if t[0] <= 0:
            raise ValueError("timestamps must be positive unix seconds")
        if np.any(np.abs(lon) > 180.0) or np.any(np.abs(lat) > 90.0):
            raise ValueError("coordinates out of WGS84 range")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "lat", lat)

    @classmethod
    def from_footprints(cls, vehicle_id: str, footprints: Iterable[Footprint]) -> "Trajectory":
        fps = list(footprints)
        if not fps:
            raise ValueError("trajectory needs at least one footprint")
        return cls(
            vehicle_id,
            [f.t for f in fps],
            [f.lon for f in fps],
            [f.lat for f in fps],
        )

    @property
    def departure(self) -> int:
        return int(self.t[0])

    @property
    def footprints(self) -> list[Footprint]:
        return [Footprint(int(t), float(x), float(y)) for t, x, y in zip(self.t, self.lon, self.lat)]

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.vehicle_id == other.vehicle_id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.lon, other.lon)
            and np.array_equal(self.lat, other.lat)
        )

    def shifted(self, new_departure: int) -> "Trajectory":
        """Same path and pacing, re-dated to start at ``new_departure``."""
        return Trajectory(self.vehicle_id, self.t - self.t[0] + int(new_departure), self.lon, self.lat)

    @property
    def trip_id(self) -> str:
        return f"{self.vehicle_id}@{self.departure}"


class TripLabel(NamedTuple):
    travel_time: int
    travel_distance: float


def trip_label(traj: Trajectory) -> TripLabel:
    """Travel time in seconds and summed great-circle hop distance in km."""
    return TripLabel(int(traj.t[-1] - traj.t[0]), haversine_path_km(traj.lon, traj.lat))


@dataclass
class Corpus:
    """An ordered collection of trajectories tagged with its split."""

    trips: list[Trajectory]
    split: str = "all"
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.trips)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trips)

    def __getitem__(self, i):
        return self.trips[i]

    def sorted(self) -> "Corpus":
        trips = sorted(self.trips, key=lambda tr: (tr.departure, tr.vehicle_id))
        return Corpus(trips, self.split, self.config_hash)


# ---------------------------------------------------------------------------
# Porto
# ---------------------------------------------------------------------------


def _parse_polyline(text: str, row_index: int | None) -> list[tuple[float, float]]:
    try:
        pts = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"malformed POLYLINE ({exc.msg if hasattr(exc, 'msg') else exc})", row_index) from None
    if not isinstance(pts, list):
        raise ParseError("POLYLINE is not a list", row_index)
    out = []
    for p in pts:
        if not (isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p)):
            raise ParseError(f"bad POLYLINE point {p!r}", row_index)
        out.append((float(p[0]), float(p[1])))
    return out


def parse_porto_row(row: Mapping[str, str] | str, row_index: int | None = None) -> Trajectory:
    """Parse one Porto record into a trajectory with 15 s synthesized timestamps.

    ``row`` is either a mapping keyed by the Porto header or one CSV line in
    the standard column order.
    """
    if isinstance(row, str):
        fields = next(csv.reader([row]))
        if len(fields) != len(PORTO_COLUMNS):
            raise ParseError(f"expected {len(PORTO_COLUMNS)} fields, got {len(fields)}", row_index)
        row = dict(zip(PORTO_COLUMNS, fields))
    try:
        missing = str(row["MISSING_DATA"]).strip().lower()
        departure = int(row["TIMESTAMP"])
        taxi = str(row["TAXI_ID"]).strip()
        polyline = row["POLYLINE"]
    except KeyError as exc:
        raise ParseError(f"missing column {exc.args[0]}", row_index) from None
    except ValueError:
        raise ParseError(f"bad TIMESTAMP {row.get('TIMESTAMP')!r}", row_index) from None
    if missing == "true":
        raise RowRejected("MISSING_DATA flag set", row_index)
    pts = _parse_polyline(polyline, row_index)
    if not pts:
        raise RowRejected("empty POLYLINE", row_index)
    n = len(pts)
    t = departure + PORTO_INTERVAL_S * np.arange(n, dtype=np.int64)
    try:
        return Trajectory(taxi, t, [p[0] for p in pts], [p[1] for p in pts])
    except ValueError as exc:
        raise ParseError(str(exc), row_index) from None


def format_porto_row(traj: Trajectory, trip_id: str | None = None) -> str:
    """Serialize a trajectory back to a Porto CSV line (standard column order)."""
    poly = "[" + ",".join(f"[{x!r},{y!r}]" for x, y in zip(traj.lon.tolist(), traj.lat.tolist())) + "]"
    fields = [
        trip_id or traj.trip_id,
        "C",
        "",
        "",
        traj.vehicle_id,
        str(traj.departure),
        "A",
        "False",
        poly,
    ]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(fields)
    return buf.getvalue()


def read_porto_csv(path: str | Path) -> tuple[Corpus, Counter]:
    """Read a Porto CSV, skipping and counting rejected or malformed rows."""
    trips: list[Trajectory] = []
    stats: Counter = Counter()
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            try:
                trips.append(parse_porto_row(row, i))
                stats["parsed"] += 1
            except RowRejected as exc:
                stats["rejected"] += 1
                log.debug("%s", exc)
            except ParseError as exc:
                stats["malformed"] += 1
                log.warning("skipping %s", exc)
    return Corpus(trips).sorted(), stats


# ---------------------------------------------------------------------------
# generic long-format CSV
# ---------------------------------------------------------------------------

GENERIC_COLUMNS = ("trip_id", "vehicle_id", "timestamp", "lon", "lat")


def read_generic_csv(path: str | Path) -> tuple[Corpus, Counter]:
    """Read footprints grouped by ``trip_id``; rows within a trip are sorted by time."""
    groups: dict[str, tuple[str, list[tuple[int, float, float]]]] = {}
    stats: Counter = Counter()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in GENERIC_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"generic CSV lacks columns {missing}")
        for i, row in enumerate(reader):
            try:
                rec = (int(row["timestamp"]), float(row["lon"]), float(row["lat"]))
            except ValueError:
                stats["malformed"] += 1
                log.warning("skipping row %d: bad numeric field", i)
                continue
            groups.setdefault(row["trip_id"], (row["vehicle_id"], []))[1].append(rec)
    trips = []
    for tid, (vid, pts) in groups.items():
        pts.sort(key=lambda p: p[0])
        try:
            trips.append(Trajectory(vid, [p[0] for p in pts], [p[1] for p in pts], [p[2] for p in pts]))
            stats["parsed"] += 1
        except ValueError as exc:
            stats["malformed"] += 1
            log.warning("skipping trip %s: %s", tid, exc)
    return Corpus(trips).sorted(), stats


# ---------------------------------------------------------------------------
# canonical records
# ---------------------------------------------------------------------------


def format_record(traj: Trajectory) -> str:
    if any(c in traj.vehicle_id for c in "\t\n\r"):
        raise ValueError("vehicle_id may not contain tabs or newlines")
    parts = [str(RECORD_VERSION), traj.vehicle_id, str(traj.departure), str(len(traj))]
    for t, x, y in zip(traj.t.tolist(), traj.lon.tolist(), traj.lat.tolist()):
        parts.extend((str(t), repr(x), repr(y)))
    return "\t".join(parts)


def parse_record(line: str, row_index: int | None = None) -> Trajectory:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        raise ParseError("truncated record", row_index)
    try:
        version = int(parts[0])
        vid = parts[1]
        departure = int(parts[2])
        n = int(parts[3])
    except ValueError:
        raise ParseError("bad record header", row_index) from None
    if version != RECORD_VERSION:
        raise ParseError(f"unsupported record version {version}", row_index)
    body = parts[4:]
    if len(body) != 3 * n:
        raise ParseError(f"expected {3 * n} footprint fields, got {len(body)}", row_index)
    t = np.array(body[0::3], dtype=np.int64)
    traj = Trajectory(vid, t, np.array(body[1::3], dtype=np.float64), np.array(body[2::3], dtype=np.float64))
    if traj.departure != departure:
        raise ParseError("departure does not match first footprint", row_index)
    return traj


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(f"{CORPUS_MAGIC}\tversion={RECORD_VERSION}\tsplit={corpus.split}\tconfig={corpus.config_hash}\n")
        for traj in corpus:
            fh.write(format_record(traj) + "\n")
    tmp.replace(path)


def read_corpus(path: str | Path) -> Corpus:
    trips = []
    split, chash = "all", ""
    with open(path) as fh:
        for i, line in enumerate(fh):
            if i == 0 and line.startswith(CORPUS_MAGIC):
                meta = dict(kv.split("=", 1) for kv in line.strip().split("\t")[1:])
                split, chash = meta.get("split", "all"), meta.get("config", "")
                continue
            if line.strip():
                trips.append(parse_record(line, i))
    return Corpus(trips, split, chash)


# ---------------------------------------------------------------------------
# cleaning and splitting
# ---------------------------------------------------------------------------


@dataclass
class CleanReport:
    kept: int = 0
    removed: Counter = field(default_factory=Counter)


def clean_trips(
    corpus: Corpus, min_time: int = 60, max_time: int = 7200, min_points: int = 2
) -> tuple[Corpus, CleanReport]:
    """Drop trips outside ``[min_time, max_time]`` seconds or with too few points.

    Each removed trip is attributed to the first rule it violates.
    """
    report = CleanReport()
    kept = []
    for traj in corpus:
        tt = int(traj.t[-1] - traj.t[0])
        if len(traj) < min_points:
            report.removed["min_points"] += 1
        elif tt < min_time:
            report.removed["min_time"] += 1
        elif tt > max_time:
            report.removed["max_time"] += 1
        else:
            kept.append(traj)
    report.kept = len(kept)
    return Corpus(kept, corpus.split, corpus.config_hash), report


def local_datetime(ts: int, tz) -> datetime:
    return datetime.fromtimestamp(int(ts), tz=tz or timezone.utc)


def split_by_date(corpus: Corpus, cutoff: date, tz=None) -> tuple[Corpus, Corpus]:
    """Half-open date split: departures dated before ``cutoff`` train, the rest test."""
    train, test = [], []
    for traj in corpus:
        (train if local_datetime(traj.departure, tz).date() < cutoff else test).append(traj)
    if not train:
        warnings.warn("split_by_date: training side is empty", stacklevel=2)
    if not test:
        warnings.warn("split_by_date: test side is empty", stacklevel=2)
    return Corpus(train, "train", corpus.config_hash), Corpus(test, "test", corpus.config_hash)

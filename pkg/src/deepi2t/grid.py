"""Equal-sized grid partition and trajectory-to-grid-sequence conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._kernels import bresenham
from .geo import meters_per_degree_lat
from .ingest import Trajectory

N_DIRECTIONS = 12
SECTOR_DEG = 360.0 / N_DIRECTIONS
SEQUENCE_VERSION = 1


class OutOfRegionError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


class CellId(NamedTuple):
    col: int
    row: int


@dataclass(frozen=True)
class GridSpec:
    """A ``width x height`` block of square cells anchored at the south-west corner.

    Cells are square in a local equirectangular projection whose longitude
    scale is taken at the region's middle latitude.
    """

    min_lon: float
    min_lat: float
    cell_size: float
    width: int
    height: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid needs at least one cell per axis")

    @classmethod
    def from_bbox(cls, min_lon, min_lat, max_lon, max_lat, cell_size) -> "GridSpec":
        dlat = cell_size / meters_per_degree_lat()
        height = max(1, math.ceil((max_lat - min_lat) / dlat))
        ref = math.radians(min_lat + height * dlat / 2.0)
        width = max(1, math.ceil((max_lon - min_lon) / (dlat / math.cos(ref))))
        return cls(min_lon, min_lat, cell_size, width, height)

    @property
    def dlat(self) -> float:
        return self.cell_size / meters_per_degree_lat()

    @property
    def ref_lat(self) -> float:
        return self.min_lat + self.height * self.dlat / 2.0

    @property
    def dlon(self) -> float:
        return self.dlat / math.cos(math.radians(self.ref_lat))

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def lon_edge(self, col):
        return self.min_lon + np.asarray(col, dtype=np.float64) * self.dlon if np.ndim(col) else self.min_lon + col * self.dlon

    def lat_edge(self, row):
        return self.min_lat + np.asarray(row, dtype=np.float64) * self.dlat if np.ndim(row) else self.min_lat + row * self.dlat

    @property
    def max_lon(self) -> float:
        return self.lon_edge(self.width)

    @property
    def max_lat(self) -> float:
        return self.lat_edge(self.height)

    def contains(self, cell: CellId) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def cell_index(self, col, row):
        return np.asarray(col) * self.height + np.asarray(row) if np.ndim(col) else col * self.height + row

    def cell_of_index(self, idx: int) -> CellId:
        return CellId(int(idx) // self.height, int(idx) % self.height)

    # projection helpers: meters east/north of the grid origin
    def project(self, lon, lat):
        x = (np.asarray(lon, dtype=np.float64) - self.min_lon) / self.dlon * self.cell_size
        y = (np.asarray(lat, dtype=np.float64) - self.min_lat) / self.dlat * self.cell_size
        return x, y

    def unproject(self, x, y):
        lon = self.min_lon + np.asarray(x, dtype=np.float64) / self.cell_size * self.dlon
        lat = self.min_lat + np.asarray(y, dtype=np.float64) / self.cell_size * self.dlat
        return lon, lat

    def cell_center(self, col, row):
        """Geographic center of a cell."""
        return self.unproject((np.asarray(col) + 0.5) * self.cell_size, (np.asarray(row) + 0.5) * self.cell_size)

    def to_dict(self) -> dict:
        return {
            "min_lon": self.min_lon,
            "min_lat": self.min_lat,
            "cell_size": self.cell_size,
            "width": self.width,
            "height": self.height,
        }


def _locate_axis(values: np.ndarray, origin: float, step: float, n: int, edge) -> np.ndarray:
    idx = np.floor((values - origin) / step).astype(np.int64)
    # floating division can land one cell off near an edge; settle against the
    # same edge formula cell_bbox uses so both agree bit-exactly
    idx = np.clip(idx, -1, n)
    lo = edge(np.clip(idx, 0, n))
    idx = np.where((idx >= 0) & (values < lo), idx - 1, idx)
    hi = edge(np.clip(idx + 1, 0, n))
    idx = np.where((idx < n) & (values >= hi), idx + 1, idx)
    return idx


def locate_many(spec: GridSpec, lon, lat) -> tuple[np.ndarray, np.ndarray]:
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    cols = _locate_axis(lon, spec.min_lon, spec.dlon, spec.width, spec.lon_edge)
    rows = _locate_axis(lat, spec.min_lat, spec.dlat, spec.height, spec.lat_edge)
    bad = (lon < spec.min_lon) | (lat < spec.min_lat) | (cols < 0) | (rows < 0) | (cols >= spec.width) | (rows >= spec.height)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise OutOfRegionError(f"point ({lon[i]:.6f}, {lat[i]:.6f}) lies outside the grid region")
    return cols, rows


def locate(spec: GridSpec, lon: float, lat: float) -> CellId:
    """Cell containing a point, using half-open ``[edge, next_edge)`` intervals."""
    cols, rows = locate_many(spec, lon, lat)
    return CellId(int(cols[0]), int(rows[0]))


def bearing_to_direction(bearing: float) -> int:
    """Map a compass bearing (clockwise from north) to one of 12 30-degree sectors."""
    b = float(bearing) % 360.0
    return min(int(b // SECTOR_DEG), N_DIRECTIONS - 1)


def cell_bearing(dcol: int, drow: int) -> float:
    """Bearing between cell centers; columns grow east, rows grow north."""
    return math.degrees(math.atan2(dcol, drow)) % 360.0


class GridStep(NamedTuple):
    cell: CellId
    direction: int
    enter_time: float
    cumulative_time: float
    padded: bool


@dataclass(eq=False)
class GridSequence:
    cols: np.ndarray
    rows: np.ndarray
    directions: np.ndarray
    enter_times: np.ndarray
    cumulative: np.ndarray
    padded: np.ndarray
    vehicle_id: str
    departure: int
    weather_code: int = 0

    def __len__(self) -> int:
        return int(self.cols.size)

    @property
    def steps(self) -> list[GridStep]:
        return [
            GridStep(CellId(int(c), int(r)), int(d), float(e), float(t), bool(p))
            for c, r, d, e, t, p in zip(self.cols, self.rows, self.directions, self.enter_times, self.cumulative, self.padded)
        ]

    @property
    def cells(self) -> list[CellId]:
        return [CellId(int(c), int(r)) for c, r in zip(self.cols, self.rows)]

    @property
    def travel_time(self) -> float:
        return float(self.cumulative[-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridSequence):
            return NotImplemented
        return (
            self.vehicle_id == other.vehicle_id
            and self.departure == other.departure
            and self.weather_code == other.weather_code
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("cols", "rows", "directions", "enter_times", "cumulative", "padded")
            )
        )


def directions_for(cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    n = cols.size
    dirs = np.zeros(n, dtype=np.int64)
    for i in range(n - 1):
        dirs[i] = bearing_to_direction(cell_bearing(int(cols[i + 1] - cols[i]), int(rows[i + 1] - rows[i])))
    if n >= 2:
        dirs[-1] = dirs[-2]
    return dirs


def build_sequence(traj: Trajectory, spec: GridSpec, weather_code: int = 0) -> GridSequence:
    """Merge same-cell footprints, bridge gaps with Bresenham cells, attach directions and labels.

    Real steps carry the first-entry time relative to departure as their
    cumulative-time label, except the destination step whose label is the
    whole trip time. Bridging cells get linearly interpolated times and are
    flagged ``padded``.
    """
    cols, rows = locate_many(spec, traj.lon, traj.lat)
    rel = (traj.t - traj.t[0]).astype(np.float64)

    keep = np.ones(cols.size, dtype=bool)
    keep[1:] = (cols[1:] != cols[:-1]) | (rows[1:] != rows[:-1])
    mc, mr, mt = cols[keep], rows[keep], rel[keep]
    if mc.size < 2:
        raise SequenceTooShortError("trajectory stays inside a single grid cell")

    out_c, out_r, out_t, out_p = [int(mc[0])], [int(mr[0])], [float(mt[0])], [False]
    for i in range(1, mc.size):
        c0, r0, c1, r1 = out_c[-1], out_r[-1], int(mc[i]), int(mr[i])
        gap = max(abs(c1 - c0), abs(r1 - r0))
        if gap > 1:
            line = bresenham(c0, r0, c1, r1)
            t0, t1 = float(mt[i - 1]), float(mt[i])
            for k in range(1, gap):
                out_c.append(int(line[k, 0]))
                out_r.append(int(line[k, 1]))
                out_t.append(t0 + (t1 - t0) * k / gap)
                out_p.append(True)
        out_c.append(c1)
        out_r.append(r1)
        out_t.append(float(mt[i]))
        out_p.append(False)

    c = np.array(out_c, dtype=np.int64)
    r = np.array(out_r, dtype=np.int64)
    enter = np.array(out_t, dtype=np.float64)
    cum = enter.copy()
    cum[-1] = rel[-1]
    return GridSequence(
        cols=c,
        rows=r,
        directions=directions_for(c, r),
        enter_times=enter,
        cumulative=cum,
        padded=np.array(out_p, dtype=bool),
        vehicle_id=traj.vehicle_id,
        departure=traj.departure,
        weather_code=int(weather_code),
    )


def format_sequence(seq: GridSequence) -> str:
    head = [str(SEQUENCE_VERSION), seq.vehicle_id, str(seq.departure), str(seq.weather_code), str(len(seq))]
    body = [
        f"{c},{r},{d},{e!r},{t!r},{int(p)}"
        for c, r, d, e, t, p in zip(
            seq.cols.tolist(), seq.rows.tolist(), seq.directions.tolist(),
            seq.enter_times.tolist(), seq.cumulative.tolist(), seq.padded.tolist(),
        )
    ]
    return "\t".join(head + body)


def parse_sequence(line: str) -> GridSequence:
    parts = line.rstrip("\n").split("\t")
    version, vid, dep, weather, n = parts[:5]
    if int(version) != SEQUENCE_VERSION:
        raise ValueError(f"unsupported sequence version {version}")
    steps = [p.split(",") for p in parts[5:]]
    if len(steps) != int(n):
        raise ValueError("sequence length mismatch")
    cols = np.array([int(s[0]) for s in steps], dtype=np.int64)
    return GridSequence(
        cols=cols,
        rows=np.array([int(s[1]) for s in steps], dtype=np.int64),
        directions=np.array([int(s[2]) for s in steps], dtype=np.int64),
        enter_times=np.array([float(s[3]) for s in steps]),
        cumulative=np.array([float(s[4]) for s in steps]),
        padded=np.array([s[5] == "1" for s in steps], dtype=bool),
        vehicle_id=vid,
        departure=int(dep),
        weather_code=int(weather),
    )


def write_sequences(seqs, path: str | Path, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"#deepi2t-sequences\tversion={SEQUENCE_VERSION}\tconfig={config_hash}\n")
        for s in seqs:
            fh.write(format_sequence(s) + "\n")


def read_sequences(path: str | Path) -> list[GridSequence]:
    with open(path) as fh:
        return [parse_sequence(line) for line in fh if line.strip() and not line.startswith("#")]

"""Hourly flow per grid cell and trip attribute indices."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone, tzinfo
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .grid import GridSequence, GridSpec

log = logging.getLogger(__name__)

MINUTES_PER_WEEK = 7 * 24 * 60
FLOW_ROWS = 1000
DRIVER_ROWS = 25000
WEATHER_ROWS = 400
FLOW_UNIT = 100.0

# table name -> (rows, dims)
EMBEDDING_TABLES = {
    "direction": (12, 200),
    "flow": (FLOW_ROWS, 50),
    "start_time": (MINUTES_PER_WEEK, 30),
    "driver": (DRIVER_ROWS, 10),
    "weather": (WEATHER_ROWS, 10),
}

FLOW_MAGIC = b"DI2TFLOW"
FLOW_VERSION = 1


def resolve_tz(tz) -> tzinfo:
    if tz is None:
        return timezone.utc
    if isinstance(tz, str):
        if tz.upper() == "UTC":
            return timezone.utc
        from zoneinfo import ZoneInfo

        return ZoneInfo(tz)
    return tz


@dataclass
class FlowTable:
    """Mean distinct-trip visits per (col, row, hour) over the training days."""

    values: np.ndarray
    n_days: int
    split: str = "train"
    config_hash: str = ""

    def at(self, col, row, hour):
        return self.values[col, row, hour]


def build_flow_table(train_sequences: Sequence[GridSequence], spec: GridSpec, tz=None, split: str = "train") -> FlowTable:
    """Count each trip once per (cell, date, hour) it visits, averaged over training dates."""
    if split != "train":
        raise ValueError(f"flow table must come from the training split, got {split!r}")
    tz = resolve_tz(tz)
    keys = []
    days = set()
    for trip_no, seq in enumerate(train_sequences):
        ts = seq.departure + np.floor(seq.enter_times).astype(np.int64)
        # hour and calendar day per step (local time)
        stamps = [datetime.fromtimestamp(int(t), tz) for t in ts]
        hours = np.array([s.hour for s in stamps], dtype=np.int64)
        ordinals = np.array([s.toordinal() for s in stamps], dtype=np.int64)
        days.add(datetime.fromtimestamp(seq.departure, tz).toordinal())
        cells = spec.cell_index(seq.cols, seq.rows)
        keys.append(np.stack([np.full(cells.size, trip_no), cells, ordinals, hours], axis=1))
    values = np.zeros((spec.width, spec.height, 24))
    if keys:
        uniq = np.unique(np.concatenate(keys), axis=0)
        cell, hour = uniq[:, 1], uniq[:, 3]
        counts = np.zeros((spec.n_cells, 24))
        np.add.at(counts, (cell, hour), 1.0)
        values = counts.reshape(spec.width, spec.height, 24) / max(len(days), 1)
    return FlowTable(values, len(days))


def flow_bucket(flow, unit: float = FLOW_UNIT, rows: int = FLOW_ROWS):
    """Quantize mean vehicles/hour into ``unit``-sized buckets, saturating at the last row."""
    f = np.asarray(flow, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("flow must be non-negative")
    b = np.minimum(np.floor(f / unit), rows - 1).astype(np.int64)
    return int(b) if b.ndim == 0 else b


_FLOW_HEADER = struct.Struct("<8sI16sIIII")


def save_flow_table(path: str | Path, table: FlowTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    W, H, D = table.values.shape
    with open(path, "wb") as fh:
        fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, FLOW_VERSION, table.config_hash.encode().ljust(16, b"\0")[:16], W, H, D, table.n_days))
        fh.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())


def load_flow_table(path: str | Path) -> FlowTable:
    raw = Path(path).read_bytes()
    magic, version, chash, W, H, D, n_days = _FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC or version != FLOW_VERSION:
        raise ValueError(f"{path}: not a flow table")
    values = np.frombuffer(raw, dtype="<f8", count=W * H * D, offset=_FLOW_HEADER.size).reshape(W, H, D).copy()
    return FlowTable(values, n_days, "train", chash.rstrip(b"\0").decode())


# ---------------------------------------------------------------------------
# attributes
# ---------------------------------------------------------------------------


def minute_of_week(ts: int, tz=None) -> int:
    """Minutes since Monday 00:00 local time."""
    d = datetime.fromtimestamp(int(ts), resolve_tz(tz))
    return d.weekday() * 1440 + d.hour * 60 + d.minute


def split_minute_of_week(idx: int) -> tuple[int, int, int]:
    return idx // 1440, (idx % 1440) // 60, idx % 60


class DriverRegistry:
    """Dense driver ids in first-seen order; id 0 is reserved for unknown drivers."""

    def __init__(self, capacity: int = DRIVER_ROWS):
        self.capacity = capacity
        self.ids: dict[str, int] = {}
        self.frozen = False
        self.overflow = 0
        self.config_hash = ""

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, driver: str) -> int:
        idx = self.ids.get(driver)
        if idx is not None:
            return idx
        if self.frozen:
            return 0
        if len(self.ids) + 1 >= self.capacity:
            self.overflow += 1
            if self.overflow == 1:
                log.warning("driver registry full at %d drivers; new drivers map to id 0", self.capacity - 1)
            return 0
        idx = len(self.ids) + 1
        self.ids[driver] = idx
        return idx

    def freeze(self) -> "DriverRegistry":
        self.frozen = True
        return self

    def save(self, path: str | Path, config_hash: str = "") -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(f"#deepi2t-drivers\tcapacity={self.capacity}\tconfig={config_hash}\n")
            for k, v in self.ids.items():
                fh.write(f"{k}\t{v}\n")

    @classmethod
    def load(cls, path: str | Path) -> "DriverRegistry":
        reg = None
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    meta = dict(kv.split("=", 1) for kv in line.strip().split("\t")[1:])
                    reg = cls(int(meta["capacity"]))
                    reg.config_hash = meta.get("config", "")
                    continue
                k, v = line.rstrip("\n").split("\t")
                reg.ids[k] = int(v)
        return reg.freeze()

    def to_state(self) -> dict:
        return {"capacity": self.capacity, "ids": dict(self.ids)}

    @classmethod
    def from_state(cls, state: dict) -> "DriverRegistry":
        reg = cls(state["capacity"])
        reg.ids = dict(state["ids"])
        return reg.freeze()


class WeatherFeed(Protocol):
    def code_at(self, ts: int, lon: float, lat: float) -> str: ...


class ConstantWeather:
    def __init__(self, code: str = "unknown"):
        self.code = code

    def code_at(self, ts, lon, lat) -> str:
        return self.code


@dataclass
class WeatherCodes:
    """Enumeration of weather categories; index 0 is ``unknown``."""

    names: list[str] = field(default_factory=lambda: ["unknown"])

    def __post_init__(self):
        if not self.names or self.names[0] != "unknown":
            self.names = ["unknown"] + [n for n in self.names if n != "unknown"]
        if len(self.names) > WEATHER_ROWS:
            raise ValueError(f"at most {WEATHER_ROWS} weather codes")

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            return 0


@dataclass(frozen=True)
class AttributeIndices:
    start_time_idx: int
    driver_idx: int
    weather_idx: int


def encode_attributes(
    departure: int,
    vehicle_id: str,
    registry: DriverRegistry,
    weather: WeatherFeed | None = None,
    codes: WeatherCodes | None = None,
    lon: float = 0.0,
    lat: float = 0.0,
    tz=None,
) -> AttributeIndices:
    w = 0
    if weather is not None:
        w = (codes or WeatherCodes()).index(weather.code_at(departure, lon, lat))
    return AttributeIndices(minute_of_week(departure, tz), registry.index(vehicle_id), w)


# ---------------------------------------------------------------------------
# model-ready encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedSequence:
    """Integer lookups and float targets for one grid sequence."""

    cells: np.ndarray
    directions: np.ndarray
    flows: np.ndarray
    targets: np.ndarray
    supervised: np.ndarray
    start_idx: int
    driver_idx: int
    weather_idx: int
    departure: int
    hour: int
    trip_id: str = ""

    def __len__(self) -> int:
        return int(self.cells.size)


class StepEncoder:
    """Turns grid sequences into model lookups using the training-period tables.

    Flow is looked up at the departure hour for every step, since passing
    times are unknown at query time.
    """

    def __init__(
        self,
        spec: GridSpec,
        flow: FlowTable,
        registry: DriverRegistry,
        tz="UTC",
        flow_unit: float = FLOW_UNIT,
        weather: WeatherFeed | None = None,
        codes: WeatherCodes | None = None,
    ):
        self.spec = spec
        self.flow = flow
        self.registry = registry
        self.tz_name = tz if isinstance(tz, str) else "UTC"
        self.tz = resolve_tz(tz)
        self.flow_unit = flow_unit
        self.weather = weather
        self.codes = codes or WeatherCodes()

    def encode(self, seq: GridSequence, departure: int | None = None, trip_id: str = "") -> EncodedSequence:
        dep = seq.departure if departure is None else int(departure)
        hour = datetime.fromtimestamp(dep, self.tz).hour
        attrs = encode_attributes(dep, seq.vehicle_id, self.registry, None, self.codes, tz=self.tz)
        weather_idx = seq.weather_code
        if self.weather is not None:
            lon, lat = self.spec.cell_center(seq.cols[0], seq.rows[0])
            weather_idx = self.codes.index(self.weather.code_at(dep, float(lon), float(lat)))
        flows = flow_bucket(self.flow.values[seq.cols, seq.rows, hour], self.flow_unit)
        return EncodedSequence(
            cells=np.asarray(self.spec.cell_index(seq.cols, seq.rows), dtype=np.int64),
            directions=seq.directions.astype(np.int64),
            flows=np.atleast_1d(flows).astype(np.int64),
            targets=seq.cumulative.astype(np.float64),
            supervised=~seq.padded,
            start_idx=attrs.start_time_idx,
            driver_idx=attrs.driver_idx,
            weather_idx=int(weather_idx),
            departure=dep,
            hour=hour,
            trip_id=trip_id or f"{seq.vehicle_id}@{seq.departure}",
        )

    def redate(self, enc: EncodedSequence, new_departure: int, seq: GridSequence) -> EncodedSequence:
        """Same path and driver, new departure (start-time index and flow hour follow)."""
        out = self.encode(seq, departure=new_departure, trip_id=enc.trip_id)
        out.driver_idx = enc.driver_idx
        return out

    def encode_all(self, seqs: Iterable[GridSequence]) -> list[EncodedSequence]:
        return [self.encode(s) for s in seqs]

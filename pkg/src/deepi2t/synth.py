"""Deterministic synthetic city with ground-truth travel times.

The city is a small grid with arterial lines, local streets, a river, parks
and a building-density field. Congestion in a cell is its density times an
hour-of-day rush profile, and a vehicle in a cell moves at
``base_speed(road class) * (1 - 0.7 * congestion)``. Trips are routed by
free-flow shortest path and sampled every 15 s like the Porto feed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .grid import CellId, GridSpec
from .ingest import Corpus, Trajectory

NONE, LOCAL, ARTERIAL = 0, 1, 2
LINK_N, LINK_E, LINK_S, LINK_W = 1, 2, 4, 8
_LINK_STEPS = ((LINK_N, 0, 1), (LINK_E, 1, 0), (LINK_S, 0, -1), (LINK_W, -1, 0))

MAX_SIDE = 40
CONGESTION_SLOWDOWN = 0.7
EMISSION_INTERVAL_S = 15
# Monday 2021-03-01 00:00 UTC
DEFAULT_EPOCH = int(datetime(2021, 3, 1, tzinfo=timezone.utc).timestamp())

RUSH_PROFILE = np.array(
    [0.0] * 6 + [0.5, 1.0, 1.0, 0.5] + [0.3] * 5 + [0.5, 1.0, 1.0, 0.5] + [0.2] * 3 + [0.0] * 2
)
# departures per hour of day, peaking with the rush profile
HOUR_WEIGHTS = np.array(
    [0.2, 0.1, 0.1, 0.1, 0.1, 0.3, 0.8, 2.0, 2.0, 1.2, 1.0, 1.0, 1.1, 1.0, 1.0, 1.2, 2.0, 2.0, 1.4, 1.0, 0.8, 0.6, 0.4, 0.3]
)


@dataclass
class SynthParams:
    arterial_spacing: int = 6
    n_hubs: int = 8
    n_parks: int = 3
    speed_arterial: float = 14.0
    speed_local: float = 8.0
    gps_noise_m: float = 5.0
    n_vehicles: int = 300
    min_od_hops: int = 5


@dataclass
class SyntheticCity:
    seed: int
    spec: GridSpec
    road_class: np.ndarray
    links: np.ndarray
    density: np.ndarray
    water: np.ndarray
    park: np.ndarray
    landmark: np.ndarray
    population: np.ndarray
    hubs: list[CellId]
    params: SynthParams = field(default_factory=SynthParams)

    def congestion(self, col, row, hour):
        return self.density[col, row] * RUSH_PROFILE[np.asarray(hour) % 24]

    def base_speed(self, col, row):
        cls = self.road_class[col, row]
        return np.where(cls == ARTERIAL, self.params.speed_arterial, self.params.speed_local)

    def speed(self, col, row, hour):
        return self.base_speed(col, row) * (1.0 - CONGESTION_SLOWDOWN * self.congestion(col, row, hour))

    def fingerprint(self) -> bytes:
        parts = [self.road_class, self.links, self.density, self.water, self.park, self.landmark, self.population]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "spec": self.spec.to_dict(),
                "hubs": [list(h) for h in self.hubs],
                "params": self.params.__dict__,
                "road_class": self.road_class.tolist(),
                "links": self.links.tolist(),
                "density": self.density.tolist(),
                "water": self.water.astype(int).tolist(),
                "park": self.park.astype(int).tolist(),
                "landmark": self.landmark.astype(int).tolist(),
                "population": self.population.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticCity":
        d = json.loads(text)
        return cls(
            seed=d["seed"],
            spec=GridSpec(**d["spec"]),
            road_class=np.array(d["road_class"], dtype=np.int8),
            links=np.array(d["links"], dtype=np.uint8),
            density=np.array(d["density"]),
            water=np.array(d["water"], dtype=bool),
            park=np.array(d["park"], dtype=bool),
            landmark=np.array(d["landmark"], dtype=bool),
            population=np.array(d["population"]),
            hubs=[CellId(*h) for h in d["hubs"]],
            params=SynthParams(**d["params"]),
        )

    # -- road graph ---------------------------------------------------------

    def road_graph(self) -> csr_matrix:
        """Free-flow traversal time between 4-adjacent linked road cells."""
        W, H = self.spec.width, self.spec.height
        half = self.spec.cell_size / 2.0
        free = np.where(self.road_class == ARTERIAL, self.params.speed_arterial, self.params.speed_local)
        u, v, w = [], [], []
        for bit, dc, dr in _LINK_STEPS:
            cs, rs = np.nonzero(self.links & bit)
            c2, r2 = cs + dc, rs + dr
            u.append(cs * H + rs)
            v.append(c2 * H + r2)
            w.append(half / free[cs, rs] + half / free[c2, r2])
        return csr_matrix((np.concatenate(w), (np.concatenate(u), np.concatenate(v))), shape=(W * H, W * H))

    def reachable(self) -> np.ndarray:
        """Mask of road cells in the largest connected road component."""
        g = self.road_graph()
        _, labels = connected_components(g, directed=False)
        roads = (self.road_class > 0).ravel()
        if not roads.any():
            return np.zeros_like(self.road_class, dtype=bool)
        big = np.bincount(labels[roads]).argmax()
        return ((labels == big) & roads).reshape(self.road_class.shape)


def _relink(road: np.ndarray) -> np.ndarray:
    """Link every pair of 4-adjacent road cells in both directions."""
    r = road > 0
    links = np.zeros(road.shape, dtype=np.uint8)
    links[:, :-1] |= np.where(r[:, :-1] & r[:, 1:], LINK_N, 0).astype(np.uint8)
    links[:, 1:] |= np.where(r[:, 1:] & r[:, :-1], LINK_S, 0).astype(np.uint8)
    links[:-1, :] |= np.where(r[:-1] & r[1:], LINK_E, 0).astype(np.uint8)
    links[1:, :] |= np.where(r[1:] & r[:-1], LINK_W, 0).astype(np.uint8)
    return links


def generate_city(seed: int, spec: GridSpec, params: SynthParams | None = None) -> SyntheticCity:
    """Build the city plan; the same seed and spec give a byte-identical city."""
    p = params or SynthParams()
    W, H = spec.width, spec.height
    if W > MAX_SIDE or H > MAX_SIDE:
        raise ValueError(f"synthetic cities are limited to {MAX_SIDE}x{MAX_SIDE} cells")
    rng = np.random.default_rng(seed)
    road = np.zeros((W, H), dtype=np.int8)
    sp = p.arterial_spacing
    acols = list(range(int(rng.integers(1, sp)), W, sp))
    arows = list(range(int(rng.integers(1, sp)), H, sp))
    road[acols, :] = ARTERIAL
    road[:, arows] = ARTERIAL

    # one local street per block, kept two cells clear of parallel arterials
    cb = [-1] + acols + [W]
    rb = [-1] + arows + [H]
    for a, b in zip(cb[:-1], cb[1:]):
        for c, d in zip(rb[:-1], rb[1:]):
            if rng.random() < 0.5 and b - a > 4:
                col = int(rng.integers(a + 2, b - 1))
                road[col, max(c, 0) : min(d + 1, H)] = np.maximum(road[col, max(c, 0) : min(d + 1, H)], LOCAL)
            elif d - c > 4:
                row = int(rng.integers(c + 2, d - 1))
                road[max(a, 0) : min(b + 1, W), row] = np.maximum(road[max(a, 0) : min(b + 1, W), row], LOCAL)

    water = np.zeros((W, H), dtype=bool)
    y = int(rng.integers(H // 4, max(H // 4 + 1, 3 * H // 4)))
    for col in range(W):
        y = int(np.clip(y + rng.integers(-1, 2), 0, H - 1))
        water[col, y] = True
    road[water & (road == LOCAL)] = NONE

    park = np.zeros((W, H), dtype=bool)
    for _ in range(p.n_parks):
        c, r = int(rng.integers(0, W)), int(rng.integers(0, H))
        block = (slice(c, min(c + 2, W)), slice(r, min(r + 2, H)))
        park[block] |= (road[block] == NONE) & ~water[block]

    links = _relink(road)

    road_cells = np.argwhere((road > 0) & ~water)
    hub_idx = rng.choice(len(road_cells), size=min(p.n_hubs, len(road_cells)), replace=False)
    hubs = [CellId(int(road_cells[i][0]), int(road_cells[i][1])) for i in hub_idx]

    cc, rr = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    dens = np.zeros((W, H))
    for h in hubs:
        amp, sig = rng.uniform(0.6, 1.0), rng.uniform(2.5, 5.0)
        dens += amp * np.exp(-((cc - h.col) ** 2 + (rr - h.row) ** 2) / (2 * sig * sig))
    dens = np.clip(dens * rng.uniform(0.8, 1.2, size=(W, H)), 0.0, 1.0)
    dens[water | park] = 0.0
    dens[dens < 0.08] = 0.0

    landmark = np.zeros((W, H), dtype=bool)
    pop = np.zeros((W, H))
    for h in hubs:
        landmark[h.col, h.row] = True
        cheb = np.maximum(np.abs(cc - h.col), np.abs(rr - h.row))
        pop += np.where(cheb <= 1, np.exp(-(cheb**2) / (2 * 0.7**2)), 0.0)

    city = SyntheticCity(seed, spec, road, links, dens, water, park, landmark, pop, hubs, p)
    city.population = np.where(city.reachable(), pop, 0.0)
    return city


@dataclass
class SyntheticTrip:
    origin: CellId
    destination: CellId
    departure: int
    trajectory: Trajectory
    true_time: float
    route: list[CellId]
    cell_times: np.ndarray


def route_timing(city: SyntheticCity, route: list[CellId], departure: int) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoint times along a 4-adjacent route and per-cell traversal times.

    Halfway between consecutive cell centers the vehicle crosses into the
    next cell; each half-hop runs at that cell's speed for the hour on the
    clock when the vehicle reaches it.
    """
    half = city.spec.cell_size / 2.0
    # breakpoints: center_0, edge_01, center_1, edge_12, ..., center_m
    t = [0.0]
    cell_times = np.zeros(len(route))
    for j in range(len(route) - 1):
        for k, cell in ((j, route[j]), (j + 1, route[j + 1])):
            hour = int(((departure + t[-1]) // 3600) % 24)
            dt = half / float(city.speed(cell.col, cell.row, hour))
            cell_times[k] += dt
            t.append(t[-1] + dt)
    return np.array(t), cell_times


def _trip_footprints(city, route, times, departure, vehicle, rng) -> Trajectory:
    spec = city.spec
    cx = np.array([(c.col + 0.5) * spec.cell_size for c in route])
    cy = np.array([(c.row + 0.5) * spec.cell_size for c in route])
    # breakpoint positions: centers interleaved with cell-edge midpoints
    bx = np.empty(2 * len(route) - 1)
    by = np.empty_like(bx)
    bx[0::2], by[0::2] = cx, cy
    bx[1::2], by[1::2] = (cx[:-1] + cx[1:]) / 2, (cy[:-1] + cy[1:]) / 2
    total = float(times[-1])
    end = int(round(total))
    stamps = np.arange(0, end, EMISSION_INTERVAL_S, dtype=np.int64)
    stamps = np.append(stamps, end)
    x = np.interp(stamps.astype(float), times, bx)
    y = np.interp(stamps.astype(float), times, by)
    if city.params.gps_noise_m > 0:
        x = x + rng.normal(0.0, city.params.gps_noise_m, x.size)
        y = y + rng.normal(0.0, city.params.gps_noise_m, y.size)
    eps = 1e-6
    x = np.clip(x, eps, spec.width * spec.cell_size - 1e-3)
    y = np.clip(y, eps, spec.height * spec.cell_size - 1e-3)
    lon, lat = spec.unproject(x, y)
    return Trajectory(vehicle, departure + stamps, lon, lat)


def sample_trips(
    city: SyntheticCity,
    n: int,
    days: int,
    start: int = DEFAULT_EPOCH,
    seed: int | None = None,
) -> list[SyntheticTrip]:
    """Sample ``n`` trips over ``days`` days with hub-biased origins and destinations."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng([city.seed if seed is None else seed, 17])
    W, H = city.spec.width, city.spec.height
    pop = city.population.ravel()
    if pop.sum() <= 0:
        raise ValueError("city has no populated road cells")
    pop_p = pop / pop.sum()
    hour_p = HOUR_WEIGHTS / HOUR_WEIGHTS.sum()
    graph = city.road_graph()
    pred_cache: dict[int, np.ndarray] = {}
    trips: list[SyntheticTrip] = []
    while len(trips) < n:
        o = int(rng.choice(pop.size, p=pop_p))
        d = int(rng.choice(pop.size, p=pop_p))
        oc, orow, dc, drow = o // H, o % H, d // H, d % H
        if abs(oc - dc) + abs(orow - drow) < city.params.min_od_hops:
            continue
        if o not in pred_cache:
            _, pred = dijkstra(graph, indices=o, return_predecessors=True)
            pred_cache[o] = pred
        pred = pred_cache[o]
        if pred[d] < 0:
            continue  # disconnected pair, resample
        path = [d]
        while path[-1] != o:
            path.append(int(pred[path[-1]]))
        route = [CellId(i // H, i % H) for i in reversed(path)]
        day = int(rng.integers(days))
        hour = int(rng.choice(24, p=hour_p))
        departure = start + day * 86400 + hour * 3600 + int(rng.integers(3600))
        vehicle = f"veh{int(rng.integers(city.params.n_vehicles)):04d}"
        times, cell_times = route_timing(city, route, departure)
        traj = _trip_footprints(city, route, times, departure, vehicle, rng)
        trips.append(SyntheticTrip(route[0], route[-1], departure, traj, float(times[-1]), route, cell_times))
    trips.sort(key=lambda tr: (tr.departure, tr.trajectory.vehicle_id))
    return trips


def trips_corpus(trips: list[SyntheticTrip]) -> Corpus:
    return Corpus([t.trajectory for t in trips]).sorted()


def synthetic_spec(width: int = 30, height: int = 30, cell_size: float = 200.0, min_lon: float = -8.68, min_lat: float = 41.10) -> GridSpec:
    return GridSpec(min_lon, min_lat, cell_size, width, height)


def save_city(city: SyntheticCity, path: str | Path) -> None:
    Path(path).write_text(city.to_json())


def load_city(path: str | Path) -> SyntheticCity:
    return SyntheticCity.from_json(Path(path).read_text())

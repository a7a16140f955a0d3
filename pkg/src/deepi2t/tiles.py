"""Per-cell morphological layout images: XYZ tile fetching, synthetic rendering, caching.

Cache layout under ``cache_dir``::

    {z}/{x}/{y}.png        raw slippy-map tiles
    cells/{col}_{row}.png  cropped and resampled cell images

For training, all cell images are consolidated into one archive: a fixed
header, a ``(col, row)`` index, and fixed-stride uint8 rasters that can be
memory-mapped.
"""

from __future__ import annotations

import io
import logging
import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from PIL import Image

from .grid import CellId, GridSpec

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 436, 373)  # channels, height, width
TILE_PX = 256
ARCHIVE_MAGIC = b"DI2TIMGS"
ARCHIVE_VERSION = 1

# synthetic renderer palette, RGB
PALETTE = {
    "background": (242, 239, 233),
    "building": (190, 170, 160),
    "local": (255, 255, 255),
    "arterial": (247, 178, 95),
    "water": (170, 211, 223),
    "park": (200, 230, 180),
    "landmark": (220, 60, 60),
    "casing": (120, 120, 120),
}


class TileFetchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayoutImage:
    cell: CellId
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or tuple(self.pixels.shape) != IMAGE_SHAPE:
            raise ValueError(f"layout image must be uint8 {IMAGE_SHAPE}, got {self.pixels.dtype} {self.pixels.shape}")


def cell_bbox(spec: GridSpec, cell: CellId) -> tuple[float, float, float, float]:
    """``(min_lon, min_lat, max_lon, max_lat)`` of a cell; neighbors share edges exactly."""
    col, row = cell
    return (
        float(spec.lon_edge(col)),
        float(spec.lat_edge(row)),
        float(spec.lon_edge(col + 1)),
        float(spec.lat_edge(row + 1)),
    )


def to_chw(img: Image.Image) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1))


def from_chw(pixels: np.ndarray) -> Image.Image:
    return Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)), "RGB")


def downscale(pixels: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Box-filter a C x H x W raster down to ``shape``."""
    if tuple(pixels.shape) == tuple(shape):
        return pixels
    return to_chw(from_chw(pixels).resize((shape[2], shape[1]), Image.BOX))


# ---------------------------------------------------------------------------
# slippy-map tiles
# ---------------------------------------------------------------------------


def lonlat_to_pixel(lon: float, lat: float, zoom: int) -> tuple[float, float]:
    """Global web-mercator pixel coordinates at ``zoom`` (y grows southward)."""
    scale = TILE_PX * (2**zoom)
    x = (lon + 180.0) / 360.0 * scale
    phi = math.radians(lat)
    y = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * scale
    return x, y


def meters_per_pixel(lat: float, zoom: int) -> float:
    return 2 * math.pi * 6378137.0 * math.cos(math.radians(lat)) / (TILE_PX * 2**zoom)


def choose_zoom(cell_size: float, lat: float, min_px: int = IMAGE_SHAPE[1], max_zoom: int = 19) -> int:
    """Smallest zoom at which one cell spans at least ``min_px`` tile pixels."""
    for z in range(max_zoom + 1):
        if cell_size / meters_per_pixel(lat, z) >= min_px:
            return z
    return max_zoom


class RateLimiter:
    """Spacing limiter: consecutive grants are at least ``1 / rate`` seconds apart.

    With no burst allowance, any half-open window of ``s`` seconds sees at
    most ``rate * s`` grants. Thread-safe.
    """

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if not rate > 0:
            raise ValueError("rate_limit must be positive")
        # padded by one part per million so float rounding never lets a window overshoot
        self.interval = (1.0 / rate) * (1.0 + 1e-6)
        self.clock = clock
        self.sleep = sleep
        self._next = -math.inf
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            now = self.clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self.sleep(slot - now)
        return slot


@dataclass
class TileSource:
    url_template: str
    zoom: int
    cache_dir: Path
    rate_limit: float = 1.0
    user_agent: str = ""
    concurrency: int = 4
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 20.0

    def __post_init__(self):
        self.cache_dir = Path(self.cache_dir)
        if not all(k in self.url_template for k in ("{z}", "{x}", "{y}")):
            raise ValueError("url_template needs {z}, {x} and {y} placeholders")
        if not self.user_agent:
            raise ValueError("tile servers require an identifying user_agent")
        if not self.rate_limit > 0:
            raise ValueError("rate_limit must be positive")


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _decode(path: Path) -> Image.Image | None:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert("RGB")
    except (OSError, ValueError):
        return None


class TileFetcher:
    """Cache-first tile client with retries and a shared rate limiter."""

    def __init__(self, src: TileSource, session=None, limiter: RateLimiter | None = None):
        import requests

        self.src = src
        self.session = session or requests.Session()
        self.session.headers["User-Agent"] = src.user_agent
        self.limiter = limiter or RateLimiter(src.rate_limit)
        self.requests_made = 0
        self._count_lock = threading.Lock()

    def tile_path(self, x: int, y: int) -> Path:
        return self.src.cache_dir / str(self.src.zoom) / str(x) / f"{y}.png"

    def tile(self, x: int, y: int) -> Image.Image:
        z = self.src.zoom
        path = self.tile_path(x, y)
        if path.exists():
            img = _decode(path)
            if img is not None:
                return img
            log.warning("corrupt cached tile %d/%d/%d, refetching", z, x, y)
            path.unlink(missing_ok=True)
        url = self.src.url_template.format(z=z, x=x, y=y)
        last = None
        for attempt in range(self.src.retries + 1):
            self.limiter.acquire()
            with self._count_lock:
                self.requests_made += 1
            try:
                resp = self.session.get(url, timeout=self.src.timeout)
            except Exception as exc:  # network errors are retried
                last = str(exc)
            else:
                if resp.status_code == 200:
                    try:
                        img = Image.open(io.BytesIO(resp.content))
                        img.load()
                    except (OSError, ValueError):
                        last = "undecodable tile payload"
                    else:
                        _atomic_write(path, resp.content)
                        return img.convert("RGB")
                elif resp.status_code in (429,) or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                else:
                    raise TileFetchError(f"tile {z}/{x}/{y}: HTTP {resp.status_code}")
            if attempt < self.src.retries:
                time.sleep(self.src.backoff * (2**attempt))
        raise TileFetchError(f"tile {z}/{x}/{y}: gave up after {self.src.retries + 1} attempts ({last})")

    def cell_path(self, cell: CellId) -> Path:
        return self.src.cache_dir / "cells" / f"{cell.col}_{cell.row}.png"

    def cell_image(self, spec: GridSpec, cell: CellId) -> LayoutImage:
        """Stitch, crop and resample the tiles covering a cell (cache-first)."""
        cell = CellId(*cell)
        path = self.cell_path(cell)
        if path.exists():
            img = _decode(path)
            if img is not None and img.size == (IMAGE_SHAPE[2], IMAGE_SHAPE[1]):
                return LayoutImage(cell, to_chw(img))
            log.warning("corrupt cached cell image %s, refetching", path)
            path.unlink(missing_ok=True)
        min_lon, min_lat, max_lon, max_lat = cell_bbox(spec, cell)
        z = self.src.zoom
        x0, y0 = lonlat_to_pixel(min_lon, max_lat, z)
        x1, y1 = lonlat_to_pixel(max_lon, min_lat, z)
        tx0, ty0 = int(x0 // TILE_PX), int(y0 // TILE_PX)
        tx1, ty1 = int(math.ceil(x1 / TILE_PX)) - 1, int(math.ceil(y1 / TILE_PX)) - 1
        mosaic = Image.new("RGB", ((tx1 - tx0 + 1) * TILE_PX, (ty1 - ty0 + 1) * TILE_PX))
        for tx in range(tx0, tx1 + 1):
            for ty in range(ty0, ty1 + 1):
                mosaic.paste(self.tile(tx, ty).resize((TILE_PX, TILE_PX)), ((tx - tx0) * TILE_PX, (ty - ty0) * TILE_PX))
        box = (x0 - tx0 * TILE_PX, y0 - ty0 * TILE_PX, x1 - tx0 * TILE_PX, y1 - ty0 * TILE_PX)
        out = mosaic.resize((IMAGE_SHAPE[2], IMAGE_SHAPE[1]), Image.BICUBIC, box=box)
        buf = io.BytesIO()
        out.save(buf, format="PNG")
        _atomic_write(path, buf.getvalue())
        return LayoutImage(cell, to_chw(out))


def fetch_cell_image(src: TileSource, spec: GridSpec, cell: CellId, fetcher: TileFetcher | None = None) -> LayoutImage:
    return (fetcher or TileFetcher(src)).cell_image(spec, cell)


def fetch_region(src: TileSource, spec: GridSpec, cells: Iterable[CellId] | None = None, fetcher: TileFetcher | None = None) -> dict[CellId, LayoutImage]:
    """Fetch many cells with a bounded worker pool sharing one rate limiter."""
    fetcher = fetcher or TileFetcher(src)
    cells = list(cells) if cells is not None else [CellId(c, r) for c in range(spec.width) for r in range(spec.height)]
    with ThreadPoolExecutor(max_workers=max(1, src.concurrency)) as pool:
        images = list(pool.map(lambda c: fetcher.cell_image(spec, c), cells))
    return dict(zip(cells, images))


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------


def road_half_width(road_class: int, height: int, width: int) -> int:
    frac = 0.11 if road_class == 2 else 0.05
    return max(1, int(round(frac * min(height, width))))


def render_synthetic_image(city, cell: CellId, shape: tuple[int, int, int] = IMAGE_SHAPE) -> np.ndarray:
    """Deterministic C x H x W raster of one synthetic-city cell.

    Draw order: ground (water / park / background), buildings covering a
    ``density`` share of each of 4x4 lots, a landmark marker, then roads as a
    center square plus arms toward linked neighbors.
    """
    from .synth import ARTERIAL, LINK_E, LINK_N, LINK_S, LINK_W

    col, row = cell
    _, h, w = shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    water = bool(city.water[col, row])
    if water:
        img[:] = PALETTE["water"]
    elif city.park[col, row]:
        img[:] = PALETTE["park"]
    else:
        img[:] = PALETTE["background"]

    dens = float(city.density[col, row])
    if dens > 0:
        rng = np.random.default_rng([city.seed, 7, col, row])
        lh, lw = h / 4.0, w / 4.0
        side = math.sqrt(dens) * 0.9
        for i in range(4):
            for j in range(4):
                bh, bw = side * lh, side * lw
                oy = i * lh + rng.uniform(0, lh - bh)
                ox = j * lw + rng.uniform(0, lw - bw)
                img[int(oy) : int(oy + bh), int(ox) : int(ox + bw)] = PALETTE["building"]

    if city.landmark[col, row]:
        s = max(2, int(0.12 * min(h, w)))
        img[1 : 1 + s, 1 : 1 + s] = PALETTE["landmark"]

    cls = int(city.road_class[col, row])
    if cls > 0:
        hw = road_half_width(cls, h, w)
        color = PALETTE["arterial"] if cls == ARTERIAL else PALETTE["local"]
        cy, cx = h // 2, w // 2
        links = int(city.links[col, row])
        # image row 0 is north
        rects = [(cy - hw, cy + hw, cx - hw, cx + hw)]
        if links & LINK_N:
            rects.append((0, cy, cx - hw, cx + hw))
        if links & LINK_S:
            rects.append((cy, h, cx - hw, cx + hw))
        if links & LINK_E:
            rects.append((cy - hw, cy + hw, cx, w))
        if links & LINK_W:
            rects.append((cy - hw, cy + hw, 0, cx))
        if water:
            for y0, y1, x0, x1 in rects:
                img[max(y0 - 2, 0) : y1 + 2, max(x0 - 2, 0) : x1 + 2] = PALETTE["casing"]
        for y0, y1, x0, x1 in rects:
            img[y0:y1, x0:x1] = color
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def render_city(city, shape: tuple[int, int, int] = IMAGE_SHAPE, render_shape: tuple[int, int, int] = IMAGE_SHAPE) -> np.ndarray:
    """All cell images in cell-index order, rendered at ``render_shape`` then box-filtered to ``shape``."""
    spec = city.spec
    out = np.empty((spec.n_cells, *shape), dtype=np.uint8)
    for c in range(spec.width):
        for r in range(spec.height):
            out[spec.cell_index(c, r)] = downscale(render_synthetic_image(city, CellId(c, r), render_shape), shape)
    return out


def save_cell_png(pixels: np.ndarray, path: Path) -> None:
    buf = io.BytesIO()
    from_chw(pixels).save(buf, format="PNG")
    _atomic_write(Path(path), buf.getvalue())


# ---------------------------------------------------------------------------
# consolidated archive
# ---------------------------------------------------------------------------

_ARCHIVE_HEADER = struct.Struct("<8sI16sIIIIII")


def write_archive(path: str | Path, spec: GridSpec, rasters: np.ndarray, config_hash: str = "") -> None:
    """Write rasters given in cell-index order (``(n_cells, C, H, W)`` uint8)."""
    if rasters.dtype != np.uint8 or rasters.ndim != 4 or rasters.shape[0] != spec.n_cells:
        raise ValueError("archive needs (n_cells, C, H, W) uint8 rasters in cell-index order")
    n, C, H, W = rasters.shape
    idx = np.arange(n)
    index = np.stack([idx // spec.height, idx % spec.height], axis=1).astype("<i4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, config_hash.encode().ljust(16, b"\0")[:16], spec.width, spec.height, n, C, H, W))
        fh.write(index.tobytes())
        fh.write(np.ascontiguousarray(rasters).tobytes())
    os.replace(tmp, path)


def read_archive(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Memory-map an archive; returns ``(rasters, index, header)``."""
    with open(path, "rb") as fh:
        head = fh.read(_ARCHIVE_HEADER.size)
    magic, version, chash, gw, gh, n, C, H, W = _ARCHIVE_HEADER.unpack(head)
    if magic != ARCHIVE_MAGIC or version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: not an image archive")
    index = np.fromfile(path, dtype="<i4", count=2 * n, offset=_ARCHIVE_HEADER.size).reshape(n, 2)
    rasters = np.memmap(path, dtype=np.uint8, mode="r", offset=_ARCHIVE_HEADER.size + index.nbytes, shape=(n, C, H, W))
    header = {"grid_width": gw, "grid_height": gh, "count": n, "shape": (C, H, W), "config_hash": chash.rstrip(b"\0").decode()}
    return rasters, index, header

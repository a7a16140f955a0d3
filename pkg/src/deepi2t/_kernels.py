"""Hot numeric loops, each with a numba-compiled and a pure-numpy variant.

The public names (``haversine_path_km``, ``bresenham``, ``line_sgd_epoch``)
dispatch to the numba variant unless ``DEEPI2T_DISABLE_NUMBA`` is set to a
truthy value or numba cannot be imported. Both variants stay importable
under ``*_numba`` / ``*_numpy`` so they can be benchmarked and cross-checked.
"""

from __future__ import annotations

import math
import os

import numpy as np

EARTH_RADIUS_KM = 6371.0

_flag = os.environ.get("DEEPI2T_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag in ("1", "true", "yes", "on")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator


USE_NUMBA = NUMBA_AVAILABLE and not _disabled


# ---------------------------------------------------------------------------
# haversine
# ---------------------------------------------------------------------------


def haversine_path_km_numpy(lon: np.ndarray, lat: np.ndarray) -> float:
    lon = np.radians(np.asarray(lon, dtype=np.float64))
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    if lon.size < 2:
        return 0.0
    dlat = lat[1:] - lat[:-1]
    dlon = lon[1:] - lon[:-1]
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat[:-1]) * np.cos(lat[1:]) * np.sin(dlon / 2.0) ** 2
    c = 2.0 * np.arcsin(np.sqrt(np.minimum(a, 1.0)))
    return float(np.sum(EARTH_RADIUS_KM * c))


@njit(cache=True)
def _haversine_path_km_jit(lon, lat):
    total = 0.0
    deg = math.pi / 180.0
    for i in range(lon.shape[0] - 1):
        p1 = lat[i] * deg
        p2 = lat[i + 1] * deg
        dp = p2 - p1
        dl = (lon[i + 1] - lon[i]) * deg
        a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
        if a > 1.0:
            a = 1.0
        total += EARTH_RADIUS_KM * 2.0 * math.asin(math.sqrt(a))
    return total


def haversine_path_km_numba(lon: np.ndarray, lat: np.ndarray) -> float:
    return float(
        _haversine_path_km_jit(
            np.ascontiguousarray(lon, dtype=np.float64),
            np.ascontiguousarray(lat, dtype=np.float64),
        )
    )


# ---------------------------------------------------------------------------
# Bresenham line between integer cells
# ---------------------------------------------------------------------------
# Along the major axis (ties go to x), the minor offset is the exact line value
# rounded half up: floor((2 * i * |d_minor| + n) / (2 * n)).


def bresenham_numpy(c0: int, r0: int, c1: int, r1: int) -> np.ndarray:
    dc, dr = c1 - c0, r1 - r0
    n = max(abs(dc), abs(dr))
    if n == 0:
        return np.array([[c0, r0]], dtype=np.int64)
    i = np.arange(n + 1, dtype=np.int64)
    sc = 1 if dc >= 0 else -1
    sr = 1 if dr >= 0 else -1
    if abs(dc) >= abs(dr):
        cols = c0 + sc * i
        rows = r0 + sr * ((2 * i * abs(dr) + n) // (2 * n))
    else:
        rows = r0 + sr * i
        cols = c0 + sc * ((2 * i * abs(dc) + n) // (2 * n))
    return np.stack([cols, rows], axis=1)


@njit(cache=True)
def _bresenham_jit(c0, r0, c1, r1):
    dc = c1 - c0
    dr = r1 - r0
    adc = abs(dc)
    adr = abs(dr)
    sc = 1 if dc >= 0 else -1
    sr = 1 if dr >= 0 else -1
    n = max(adc, adr)
    out = np.empty((n + 1, 2), dtype=np.int64)
    out[0, 0] = c0
    out[0, 1] = r0
    if n == 0:
        return out
    minor_d = adr if adc >= adr else adc
    # error term tracks 2*n*(exact - placed) so ties round half up
    err = 0
    minor = 0
    for i in range(1, n + 1):
        err += 2 * minor_d
        if err >= n:
            minor += 1
            err -= 2 * n
        if adc >= adr:
            out[i, 0] = c0 + sc * i
            out[i, 1] = r0 + sr * minor
        else:
            out[i, 0] = c0 + sc * minor
            out[i, 1] = r0 + sr * i
    return out


def bresenham_numba(c0: int, r0: int, c1: int, r1: int) -> np.ndarray:
    return _bresenham_jit(int(c0), int(r0), int(c1), int(r1))


# ---------------------------------------------------------------------------
# LINE edge-sampling SGD
# ---------------------------------------------------------------------------


def _sigmoid_py(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


_sigmoid = njit(cache=True)(_sigmoid_py)


def _log_sigmoid(x: float) -> float:
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def line_sgd_epoch_numpy(emb, ctx, src, dst, negs, lrs, first_order):
    """One pass of edge-sampled updates; returns the mean sample loss.

    ``emb`` and ``ctx`` are updated in place. For first-order training pass
    the same array as both ``emb`` and ``ctx``.
    """
    total = 0.0
    k = negs.shape[1]
    targets = np.empty(k + 1, dtype=np.int64)
    labels = np.zeros(k + 1, dtype=np.float64)
    labels[0] = 1.0
    for s in range(src.shape[0]):
        u = src[s]
        targets[0] = dst[s]
        targets[1:] = negs[s]
        lr = lrs[s]
        err = np.zeros(emb.shape[1], dtype=np.float64)
        for j in range(k + 1):
            t = targets[j]
            tv = ctx[t]
            f = float(emb[u] @ tv)
            if labels[j] > 0:
                total -= _log_sigmoid(f)
            else:
                total -= _log_sigmoid(-f)
            g = (labels[j] - _sigmoid_py(f)) * lr
            err += g * tv
            ctx[t] = tv + g * emb[u]
        emb[u] += err
    return total / max(src.shape[0], 1)


@njit(cache=True)
def _line_sgd_epoch_jit(emb, ctx, src, dst, negs, lrs):
    dim = emb.shape[1]
    k = negs.shape[1]
    err = np.empty(dim, dtype=np.float64)
    total = 0.0
    for s in range(src.shape[0]):
        u = src[s]
        lr = lrs[s]
        for d in range(dim):
            err[d] = 0.0
        for j in range(k + 1):
            if j == 0:
                t = dst[s]
                label = 1.0
            else:
                t = negs[s, j - 1]
                label = 0.0
            f = 0.0
            for d in range(dim):
                f += emb[u, d] * ctx[t, d]
            if label > 0.0:
                x = f
            else:
                x = -f
            if x >= 0.0:
                total += math.log1p(math.exp(-x))
            else:
                total += -x + math.log1p(math.exp(x))
            g = (label - _sigmoid(f)) * lr
            for d in range(dim):
                err[d] += g * ctx[t, d]
                ctx[t, d] += g * emb[u, d]
        for d in range(dim):
            emb[u, d] += err[d]
    if src.shape[0] == 0:
        return 0.0
    return total / src.shape[0]


def line_sgd_epoch_numba(emb, ctx, src, dst, negs, lrs, first_order):
    # first_order is expressed by aliasing ctx to emb; the kernel is agnostic
    return float(_line_sgd_epoch_jit(emb, ctx, src, dst, negs, lrs))


if USE_NUMBA:
    haversine_path_km = haversine_path_km_numba
    bresenham = bresenham_numba
    line_sgd_epoch = line_sgd_epoch_numba
else:
    haversine_path_km = haversine_path_km_numpy
    bresenham = bresenham_numpy
    line_sgd_epoch = line_sgd_epoch_numpy

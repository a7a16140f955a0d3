"""Great-circle distance helpers."""

from __future__ import annotations

import math

import numpy as np

from ._kernels import EARTH_RADIUS_KM, haversine_path_km

__all__ = ["EARTH_RADIUS_KM", "haversine_km", "haversine_path_km", "meters_per_degree_lat"]


def haversine_km(lon1: float, lat1: float, lon2: float, lat2: float) -> float:
    """Great-circle distance in kilometers between two WGS84 points."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * math.asin(math.sqrt(min(a, 1.0)))


def meters_per_degree_lat() -> float:
    return EARTH_RADIUS_KM * 1000.0 * math.pi / 180.0


def haversine_km_vec(lon1, lat1, lon2, lat2) -> np.ndarray:
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * np.arcsin(np.sqrt(np.minimum(a, 1.0)))

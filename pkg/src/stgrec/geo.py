"""Great-circle distance and the temporal / spatial encodings.

Everything here is pure and reentrant. Times are float seconds, angles are
degrees at the API surface and radians internally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

EARTH_RADIUS_KM = 6371.0


class GeoError(ValueError):
    """Raised for non-finite or out-of-range coordinates."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        check_coordinates(self.lat, self.lon)


def check_coordinates(lat, lon):
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise GeoError(f"non-finite coordinate ({lat}, {lon})")
    if not -90.0 <= lat <= 90.0:
        raise GeoError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise GeoError(f"longitude {lon} outside [-180, 180]")


class Mapping(enum.Enum):
    IDENTITY = "identity"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class SpatialEncodingConfig:
    tau: float = 1.0
    mapping: Mapping = Mapping.IDENTITY

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be a positive finite number, got {self.tau}")


@dataclass
class TemporalEncodingParams:
    """Frequencies (rad per time unit) and phases (rad) of the cosine time encoding."""

    omega: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.omega.ndim != 1 or self.omega.shape != self.bias.shape:
            raise ValueError(
                f"omega and bias must be vectors of equal length, got {self.omega.shape} and {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.bias))):
            raise ValueError("temporal encoding parameters must be finite")

    @property
    def dim(self) -> int:
        return self.omega.shape[0]


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    return float(haversine_km_array(a.lat, a.lon, b.lat, b.lon))


def haversine_km_array(lat1, lon1, lat2, lon2):
    """Vectorized great-circle distance over broadcastable arrays of degrees.

    Inputs are assumed already validated; use this on trusted graph arrays.
    The central angle is computed as atan2(|a x b|, a . b), which equals the
    haversine angle but stays accurate near antipodes, where arcsin(sqrt(h))
    loses about half the significant digits.
    """
    lat1, lon1, lat2, lon2 = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (lat1, lon1, lat2, lon2)))
    # a fixed argument order makes d(a, b) == d(b, a) bit for bit
    swap = (lat1 > lat2) | ((lat1 == lat2) & (lon1 > lon2))
    lat1, lat2 = np.where(swap, lat2, lat1), np.where(swap, lat1, lat2)
    lon1, lon2 = np.where(swap, lon2, lon1), np.where(swap, lon1, lon2)
    lat1 = np.radians(lat1)
    lat2 = np.radians(lat2)
    dlon = np.radians(lon2 - lon1)
    s1, c1, s2, c2 = np.sin(lat1), np.cos(lat1), np.sin(lat2), np.cos(lat2)
    cross = np.hypot(c2 * np.sin(dlon), c1 * s2 - s1 * c2 * np.cos(dlon))
    dot = s1 * s2 + c1 * c2 * np.cos(dlon)
    return EARTH_RADIUS_KM * np.arctan2(cross, dot)


def temporal_encode(t1: float, t2: float, params: TemporalEncodingParams) -> np.ndarray:
    if not (math.isfinite(t1) and math.isfinite(t2)):
        raise ValueError(f"non-finite time ({t1}, {t2})")
    return np.cos(params.omega * abs(t1 - t2) + params.bias)


def temporal_encode_array(dt, omega, bias):
    """cos(omega * |dt| + bias) for an array of intervals; output shape dt.shape + (c_t,)."""
    dt = np.abs(np.asarray(dt, dtype=np.float64))
    return np.cos(dt[..., None] * omega + bias)


def spatial_weight(dist_km, cfg: SpatialEncodingConfig):
    """psi as a function of distance: 1 / (f(d / tau) + 1)."""
    x = np.asarray(dist_km, dtype=np.float64) / cfg.tau
    if cfg.mapping is Mapping.IDENTITY:
        return 1.0 / (x + 1.0)
    # 1 / (e^x + 1) == expit(-x), which does not overflow for far points
    return expit(-x)


def spatial_encode(a: GeoPoint, b: GeoPoint, cfg: SpatialEncodingConfig) -> float:
    return float(spatial_weight(haversine_km(a, b), cfg))

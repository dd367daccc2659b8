"""Synthetic check-in logs with planted spatial and daily-phase structure.

Every venue serves one phase of the day (e.g. lunch or dinner). Every user
lives in one region and has a few favorite venues near home for each
phase, drawn among venues serving that phase. Most events revisit a
favorite of the current phase; a fixed fraction are uniform random venues
anywhere. Users always travel from (near) home.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geo import haversine_km_array

KM_PER_DEG_LAT = math.pi * 6371.0 / 180.0


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 3000
    n_events: int = 60000
    n_regions: int = 10
    period_s: float = 86400.0
    region_radius_km: float = 2.0
    noise_frac: float = 0.2
    seed: int = 0
    n_phases: int = 2
    favorites_per_phase: int = 3
    span_days: float = 60.0
    item_box_km: float = 3.0          # venues uniform in a +/- box around the region center
    home_box_km: float = 1.0          # homes uniform in a +/- box around the region center
    home_jitter_km: float = 0.2       # per-event jitter of the origin location
    region_spacing_km: float = 40.0
    origin_lat: float = 31.2
    origin_lon: float = 121.4
    start_time: float = 1.6e9

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_events", "n_regions", "n_phases", "favorites_per_phase"):
            if getattr(self, name) < 1:
                raise SynthConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.noise_frac < 1.0:
            raise SynthConfigError("noise_frac must lie in [0, 1)")
        if self.period_s <= 0 or self.span_days <= 0 or self.region_radius_km <= 0:
            raise SynthConfigError("period_s, span_days and region_radius_km must be positive")


def _offset(lat0, lon0, dn_km, de_km):
    lat = lat0 + dn_km / KM_PER_DEG_LAT
    lon = lon0 + de_km / (KM_PER_DEG_LAT * np.cos(np.radians(lat0)))
    return lat, lon


def phase_of(t, cfg: SynthConfig):
    return (np.floor(np.mod(t, cfg.period_s) / (cfg.period_s / cfg.n_phases))).astype(np.int64)


def generate_with_truth(cfg: SynthConfig):
    """Returns (csv_bytes, truth) where truth holds homes, favorites and item locations."""
    rng = np.random.default_rng(cfg.seed)
    side = math.ceil(math.sqrt(cfg.n_regions))
    grid = np.arange(cfg.n_regions)
    c_lat, c_lon = _offset(cfg.origin_lat, cfg.origin_lon,
                           (grid // side) * cfg.region_spacing_km, (grid % side) * cfg.region_spacing_km)

    item_region = np.arange(cfg.n_items) % cfg.n_regions
    # phases alternate within each region so every region serves all of them
    item_phase = (np.arange(cfg.n_items) // cfg.n_regions) % cfg.n_phases
    if np.bincount(item_region, minlength=cfg.n_regions).min() == 0:
        raise SynthConfigError("some region has no items")
    off = rng.uniform(-cfg.item_box_km, cfg.item_box_km, size=(cfg.n_items, 2))
    item_lat, item_lon = _offset(c_lat[item_region], c_lon[item_region], off[:, 0], off[:, 1])
    item_lat, item_lon = np.round(item_lat, 6), np.round(item_lon, 6)

    user_region = np.arange(cfg.n_users) % cfg.n_regions
    off = rng.uniform(-cfg.home_box_km, cfg.home_box_km, size=(cfg.n_users, 2))
    home_lat, home_lon = _offset(c_lat[user_region], c_lon[user_region], off[:, 0], off[:, 1])

    favorites = np.empty((cfg.n_users, cfg.n_phases, cfg.favorites_per_phase), dtype=np.int64)
    for u in range(cfg.n_users):
        near = haversine_km_array(home_lat[u], home_lon[u], item_lat, item_lon) <= cfg.region_radius_km
        for ph in range(cfg.n_phases):
            pool = np.flatnonzero(near & (item_phase == ph))
            if len(pool) < cfg.favorites_per_phase:
                raise SynthConfigError(
                    f"user {u} has {len(pool)} phase-{ph} items within {cfg.region_radius_km} km, "
                    f"needs {cfg.favorites_per_phase}")
            favorites[u, ph] = rng.choice(pool, size=cfg.favorites_per_phase, replace=False)

    gaps = rng.exponential(cfg.span_days * 86400.0 / cfg.n_events, size=cfg.n_events)
    ts = np.round(cfg.start_time + np.cumsum(gaps), 3)
    users = rng.integers(cfg.n_users, size=cfg.n_events)
    phase = phase_of(ts, cfg)
    pick = rng.integers(cfg.favorites_per_phase, size=cfg.n_events)
    items = favorites[users, phase, pick]
    noisy = np.zeros(cfg.n_events, dtype=bool)
    noisy[rng.permutation(cfg.n_events)[:int(math.floor(cfg.noise_frac * cfg.n_events))]] = True
    items[noisy] = rng.integers(cfg.n_items, size=int(noisy.sum()))
    jit = rng.uniform(-cfg.home_jitter_km, cfg.home_jitter_km, size=(cfg.n_events, 2))
    u_lat, u_lon = _offset(home_lat[users], home_lon[users], jit[:, 0], jit[:, 1])

    buf = io.StringIO()
    for k, v in asdict(cfg).items():
        buf.write(f"# {k} = {v}\n")
    buf.write(f"# venues lie in a +/-{cfg.item_box_km} km box around region centers; "
              f"regions {cfg.region_spacing_km} km apart; venue k serves phase "
              f"(k // n_regions) % n_phases\n")
    buf.write("user_id,item_id,timestamp,user_lat,user_lon,item_lat,item_lon\n")
    for e in range(cfg.n_events):
        i = items[e]
        buf.write(f"u{users[e]},i{i},{ts[e]:.3f},{u_lat[e]:.6f},{u_lon[e]:.6f},"
                  f"{item_lat[i]:.6f},{item_lon[i]:.6f}\n")
    truth = {
        "home_lat": home_lat, "home_lon": home_lon, "favorites": favorites, "item_phase": item_phase,
        "item_lat": item_lat, "item_lon": item_lon, "noisy": noisy,
        "users": users, "items": items, "timestamps": ts,
    }
    return buf.getvalue().encode("utf-8"), truth


def generate(cfg: SynthConfig) -> bytes:
    """CSV bytes in the ingest schema; '#' lines carry the config."""
    return generate_with_truth(cfg)[0]

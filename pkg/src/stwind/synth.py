"""Synthetic dataset generator.

Produces observation, NWP, and site CSVs from a known ground truth: a smooth
advected mean field plus a space-time correlated local field drawn from the
package's own covariance model.  The hourly NWP series are a smoothed copy of
the truth with configurable additive, multiplicative, and temporal-shift
biases, so calibration and kernel machinery can be exercised end to end
against data whose generating process is fully known.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .data import TARGET_STEP, Projection, Site, format_timestamp
from .errors import ValidationError
from .gp import simulate_space_time
from .kernels import MS_TO_KM_PER_LAG, AdvectionParams, KernelParams

#: steps of truth generated beyond each end of the observation grid so that
#: temporal-shift biases and the trailing hourly knot stay in range
PAD_STEPS = 36

STREAM_TRUTH = 0
STREAM_NWP = 1
STREAM_MISSING = 2


@dataclass(frozen=True)
class SimulateConfig:
    n_sites: int = 2
    days: int = 30
    spacing_km: float = 50.0
    lat0: float = 40.0
    lon0: float = -73.0
    origin: str = "2024-01-01T00:00:00Z"
    # local-field covariance
    alpha: float = 1.0
    lam: float = 0.3
    r_s: float = 20.0
    r_t: float = 6.0
    delta: float = 0.02
    # prevailing flow, m/s
    advect_u: float = 6.0
    advect_v: float = 2.0
    advect_spread: float = 1.0
    # mean field, m/s
    base: float = 9.0
    diurnal_amp: float = 2.5
    synoptic_amp: float = 2.0
    # NWP biases
    bias_add: float = 0.0
    bias_mult: float = 1.0
    bias_shift_steps: int = 0
    smooth_steps: int = 9
    missing_fraction: float = 0.0
    pressure_grad_x: float = 0.005  # hPa per km
    pressure_grad_y: float = 0.015

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValidationError("n_sites must be >= 1")
        if self.days < 1:
            raise ValidationError("days must be >= 1")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValidationError("missing_fraction must be in [0, 1)")
        if abs(self.bias_shift_steps) > PAD_STEPS:
            raise ValidationError(f"|bias_shift_steps| must be <= {PAD_STEPS}")
        if self.smooth_steps < 1 or self.smooth_steps % 2 == 0:
            raise ValidationError("smooth_steps must be odd and >= 1")


@dataclass(frozen=True)
class SyntheticTruth:
    obs_sites: tuple[Site, ...]
    grid_sites: tuple[Site, ...]
    origin: datetime
    n_steps: int
    truth: np.ndarray  # (n_all_sites, n_steps + 2*PAD_STEPS), clipped at 0


def _site_layout(cfg):
    """Deterministic site geometry: observation sites along the flow axis,
    NWP grid points offset from them plus two flankers (never collinear)."""
    s = cfg.spacing_km
    obs_xy = [(i * s, 0.35 * s * (i % 2)) for i in range(cfg.n_sites)]
    grid_xy = [(x + 0.04 * s, y + 0.03 * s) for x, y in obs_xy]
    span = max(1, cfg.n_sites - 1) * s
    grid_xy.append((span * 0.5, 0.55 * s))
    grid_xy.append((span * 0.3, -0.45 * s))
    bbox = (cfg.lat0 - 5.0, cfg.lat0 + 5.0, cfg.lon0 - 5.0, cfg.lon0 + 5.0)
    proj = Projection(lat0=cfg.lat0, lon0=cfg.lon0, bbox=bbox)

    def mk(prefix, k, xy):
        lat, lon = proj.to_latlon(xy[0], xy[1])
        return Site(id=f"{prefix}{k:02d}", lat=float(lat), lon=float(lon), x=xy[0], y=xy[1])

    obs = tuple(mk("OBS", k, xy) for k, xy in enumerate(obs_xy))
    grid = tuple(mk("GRD", k, xy) for k, xy in enumerate(grid_xy))
    return obs, grid


def _mean_field(cfg, sites, n_total, rng):
    """Smooth advected mean: a diurnal wave travelling with the flow plus
    slower synoptic oscillations, per site."""
    speed_kmlag = math.hypot(cfg.advect_u, cfg.advect_v) * MS_TO_KM_PER_LAG
    if speed_kmlag > 0:
        ux = cfg.advect_u * MS_TO_KM_PER_LAG / speed_kmlag
        uy = cfg.advect_v * MS_TO_KM_PER_LAG / speed_kmlag
    else:
        ux = uy = 0.0
    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    t = np.arange(n_total, dtype=float) - PAD_STEPS
    out = np.empty((len(sites), n_total))
    for i, site in enumerate(sites):
        along = site.x * ux + site.y * uy
        delay = along / speed_kmlag if speed_kmlag > 0 else 0.0
        out[i] = (
            cfg.base
            + cfg.diurnal_amp * np.sin(2.0 * math.pi * (t - delay) / 144.0 + phases[0])
            + cfg.synoptic_amp * np.sin(2.0 * math.pi * t / 432.0 + phases[1])
            + 0.6 * cfg.synoptic_amp * np.sin(2.0 * math.pi * t / 1008.0 + phases[2])
        )
    return out


def simulate_truth(cfg, seed):
    """Ground truth over observation sites and NWP grid points."""
    obs_sites, grid_sites = _site_layout(cfg)
    all_sites = obs_sites + grid_sites
    n_steps = cfg.days * 144
    n_total = n_steps + 2 * PAD_STEPS
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_TRUTH,)))
    mean = _mean_field(cfg, all_sites, n_total, rng)
    adv = AdvectionParams(
        mean=np.array([cfg.advect_u, cfg.advect_v]) * MS_TO_KM_PER_LAG,
        cov=np.eye(2) * (cfg.advect_spread * MS_TO_KM_PER_LAG) ** 2,
    )
    params = KernelParams(
        alpha=cfg.alpha,
        lam=cfg.lam,
        r_s=cfg.r_s,
        r_t=cfg.r_t,
        delta=cfg.delta,
        beta0=0.0,
        advection=adv,
    )
    field_seed = int(rng.integers(0, 2**63 - 1))
    local = simulate_space_time(list(all_sites), n_total, params, seed=field_seed)
    truth = np.clip(mean + local, 0.0, None)
    origin = datetime.fromisoformat(cfg.origin.replace("Z", "+00:00")).astimezone(timezone.utc)
    return SyntheticTruth(
        obs_sites=obs_sites,
        grid_sites=grid_sites,
        origin=origin,
        n_steps=n_steps,
        truth=truth,
    )


def _smooth(series, window):
    if window <= 1:
        return series.copy()
    pad = window // 2
    padded = np.concatenate([series[pad:0:-1], series, series[-2 : -pad - 2 : -1]])
    kernel = np.ones(window) / window
    return np.convolve(padded, kernel, mode="valid")


def nwp_series_from_truth(cfg, truth, site_index, rng):
    """Hourly NWP variables at one grid site, biased per the config."""
    n_steps = truth.n_steps
    full = truth.truth[site_index]
    smoothed = _smooth(full, cfg.smooth_steps)
    hour_steps = np.arange(0, n_steps + 1, 6)  # 10-min indices of hourly knots
    tau = hour_steps + PAD_STEPS - cfg.bias_shift_steps
    wind = cfg.bias_mult * smoothed[tau] + cfg.bias_add
    wind = np.clip(wind, 0.0, None)

    t = hour_steps.astype(float)
    site = (truth.obs_sites + truth.grid_sites)[site_index]
    phases = rng.uniform(0.0, 2.0 * math.pi, size=5)
    u = cfg.advect_u + 1.5 * np.sin(2.0 * math.pi * t / 864.0 + phases[0])
    v = cfg.advect_v + 1.2 * np.sin(2.0 * math.pi * t / 1150.0 + phases[1])
    pressure = (
        1013.0
        + 8.0 * np.sin(2.0 * math.pi * t / 1008.0 + phases[2])
        - cfg.pressure_grad_x * site.x
        - cfg.pressure_grad_y * site.y
    )
    temp = 284.0 + 3.0 * np.sin(2.0 * math.pi * t / 144.0 + phases[3])
    humidity = np.clip(70.0 + 18.0 * np.sin(2.0 * math.pi * t / 700.0 + phases[4]), 5.0, 95.0)
    gust = 1.25 * wind + 0.4
    return {
        "WIND_SPEED": wind,
        "U": u,
        "V": v,
        "PRESSURE": pressure,
        "TEMP": temp,
        "WINDGUST": gust,
        "HUMIDITY": humidity,
    }


def generate(cfg, seed, out_dir):
    """Write sites.csv, observations.csv, and nwp.csv; returns their paths.

    Byte-identical outputs for identical (cfg, seed).
    """
    truth = simulate_truth(cfg, seed)
    rng_nwp = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAM_NWP,)))
    rng_missing = np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(STREAM_MISSING,))
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    sites_path = out_dir / "sites.csv"
    obs_path = out_dir / "observations.csv"
    nwp_path = out_dir / "nwp.csv"

    with open(sites_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "lat", "lon"])
        for site in truth.obs_sites + truth.grid_sites:
            writer.writerow([site.id, f"{site.lat:.8f}", f"{site.lon:.8f}"])

    with open(obs_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "site_id", "wind_speed_ms"])
        for i, site in enumerate(truth.obs_sites):
            series = truth.truth[i, PAD_STEPS : PAD_STEPS + truth.n_steps]
            keep = rng_missing.random(truth.n_steps) >= cfg.missing_fraction
            for t in range(truth.n_steps):
                if not keep[t]:
                    continue
                ts = truth.origin + t * TARGET_STEP
                writer.writerow([format_timestamp(ts), site.id, f"{series[t]:.6f}"])

    n_grid = len(truth.grid_sites)
    variables = [
        nwp_series_from_truth(cfg, truth, len(truth.obs_sites) + g, rng_nwp)
        for g in range(n_grid)
    ]
    columns = ["WIND_SPEED", "U", "V", "PRESSURE", "TEMP", "WINDGUST", "HUMIDITY"]
    with open(nwp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "site_id"] + columns)
        n_hours = variables[0]["WIND_SPEED"].size
        for g, site in enumerate(truth.grid_sites):
            for k in range(n_hours):
                ts = truth.origin + k * 6 * TARGET_STEP
                writer.writerow(
                    [format_timestamp(ts), site.id]
                    + [f"{variables[g][c][k]:.6f}" for c in columns]
                )
    return sites_path, obs_path, nwp_path

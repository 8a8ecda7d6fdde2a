"""Rolling-origin backtest harness, baselines, and forecast maps.

Each roll: select features on the trailing training window, fit the NWP
calibration, estimate the flow parameters from NWP wind components, fit the
residual GP, and forecast every site over the horizon.  Baselines share the
same record format: raw interpolated NWP, persistence, and a spatial-only
calibrated GP (no temporal kernel structure, no advection term).
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import calibration, features, gp
from .data import Site, format_timestamp
from .errors import BoundsError, CoverageError, InsufficientDataError, ValidationError
from .evaluation import ForecastRecord
from .kernels import AdvectionParams, PointSet, estimate_advection
from .features import FeatureSpec

log = logging.getLogger(__name__)

MODEL_FULL = "stgp"
MODEL_GOP = "gop"
MODEL_NWP = "nwp"
MODEL_PERSISTENCE = "persistence"
ALL_MODELS = (MODEL_FULL, MODEL_GOP, MODEL_NWP, MODEL_PERSISTENCE)

#: lag-0 NWP variables used by the spatial-only baseline
GOP_VARIABLES = ("PRESSURE", "TEMP", "WINDGUST", "HUMIDITY", "U", "V")

#: temporal range long enough that exp(-w^2/r_t^2) is exactly 1.0 in double
#: precision (w^2/r_t^2 < 2^-54 for |w| up to ~7e5 lags); makes the
#: fixed-lam fit purely spatial
GOP_TEMPORAL_RANGE = 1e14

MIN_TRAINING_STEPS = 288


@dataclass(frozen=True)
class BacktestConfig:
    training_steps: int = 720  # 5 days of 10-min steps
    horizon_steps: int = 36  # 6 hours
    stride: int = 36  # roll every 6 hours
    threshold: float = 0.6
    models: tuple[str, ...] = ALL_MODELS
    max_lag: int = features.MAX_LAG
    diff_lags: int = features.DIFF_MAX_LAG
    subhourly_exclusion: bool = True
    maxfev: int = 150
    max_rolls: int = 0  # 0 = every roll the coverage allows
    jobs: int = 1
    advection_scale: float = 0.6

    def __post_init__(self):
        if self.stride > self.horizon_steps:
            raise ValidationError("stride must be <= horizon_steps")
        if self.stride < 1 or self.horizon_steps < 1:
            raise ValidationError("stride and horizon must be >= 1")
        if self.training_steps < MIN_TRAINING_STEPS:
            raise ValidationError(f"training_steps must be >= {MIN_TRAINING_STEPS}")
        unknown = set(self.models) - set(ALL_MODELS)
        if unknown:
            raise ValidationError(f"unknown models {sorted(unknown)}")


def roll_issue_indices(grid_length, cfg):
    """0-based indices of the forecast origins; roll k trains on the T steps
    ending at the origin and forecasts the next H steps."""
    t = cfg.training_steps - 1
    out = []
    while t + cfg.horizon_steps <= grid_length - 1:
        out.append(t)
        t += cfg.stride
        if cfg.max_rolls and len(out) >= cfg.max_rolls:
            break
    if not out:
        raise CoverageError(
            f"roll 0 needs {cfg.training_steps + cfg.horizon_steps} steps, "
            f"dataset has {grid_length}"
        )
    return out


@dataclass
class RollState:
    """Everything fitted for one forecast origin."""

    model: str
    issue_index: int
    issue_time: str
    specs: tuple[FeatureSpec, ...]
    lag_order: int
    calib: calibration.CalibrationModel
    advection: AdvectionParams
    fitted: gp.FittedGP
    train_mean: float
    subhourly_exclusion: bool
    pool: features.CandidatePool = field(repr=False)


def _training_rows(ds, t_lo, t_hi):
    rows = []
    targets = []
    for site in ds.sites:
        obs = ds.observations[site.id]
        t = np.arange(t_lo, t_hi + 1)
        present = obs.present[t_lo : t_hi + 1]
        rows.extend((site.id, int(ti)) for ti in t[present])
        targets.extend(obs.values[t_lo : t_hi + 1][present].tolist())
    return rows, np.array(targets)


def _target_rows(ds, t_c, horizon_steps):
    return [
        (site.id, t_c + h) for site in ds.sites for h in range(1, horizon_steps + 1)
    ]


def pooled_uv(ds, t_lo, t_hi):
    """NWP wind components pooled over the distinct assigned grid points."""
    sources = sorted({ds.source[s.id] for s in ds.sites})
    u = np.concatenate([ds.nwp[src]["U"][t_lo : t_hi + 1] for src in sources])
    v = np.concatenate([ds.nwp[src]["V"][t_lo : t_hi + 1] for src in sources])
    return u, v


def fit_roll(
    ds,
    cfg,
    pool,
    t_c,
    model=MODEL_FULL,
    warm=None,
    spec_override=None,
    lag_order_override=None,
    fixed=None,
    advect=True,
    subhourly=None,
):
    """Fit calibration + residual GP for one forecast origin."""
    t_lo = t_c - cfg.training_steps + 1
    rows, y = _training_rows(ds, t_lo, t_c)
    if len(rows) == 0:
        raise InsufficientDataError(f"no observations in training window at t={t_c}")
    target_rows = _target_rows(ds, t_c, cfg.horizon_steps)

    if spec_override is None:
        specs = features.select_features(
            pool, y, rows, threshold=cfg.threshold, target_rows=target_rows
        )
    else:
        specs = list(spec_override)
    if lag_order_override is None:
        lag_order = features.lag_order_for_dataset(ds, t_lo, t_c, max_lag=cfg.max_lag)
    else:
        lag_order = lag_order_override

    site_ids = np.array([sid for sid, _ in rows])
    t_idx = np.array([ti for _, ti in rows], dtype=int)
    x, valid = calibration.build_design(pool, specs, lag_order, site_ids, t_idx)
    n_dropped = int(np.sum(~valid))
    if n_dropped:
        log.debug("roll t=%d: %d training rows dropped (incomplete features)", t_c, n_dropped)
    calib = calibration.fit_mu(x[valid], y[valid], specs, lag_order)
    z = y[valid] - x[valid] @ calib.coefficients()

    if advect:
        u, v = pooled_uv(ds, t_lo, min(t_c + cfg.horizon_steps, ds.grid.length - 1))
        adv = estimate_advection(u, v, scale=cfg.advection_scale)
    else:
        adv = AdvectionParams(np.zeros(2), np.zeros((2, 2)))

    kept_rows = [rows[i] for i in np.flatnonzero(valid)]
    pts = PointSet.from_rows(list(ds.sites), kept_rows)
    fitted = gp.fit_gp(z, pts, adv, init=warm, maxfev=cfg.maxfev, fixed=fixed)

    if subhourly is None:
        subhourly = cfg.subhourly_exclusion
    return RollState(
        model=model,
        issue_index=t_c,
        issue_time=format_timestamp(ds.grid.time_at(t_c)),
        specs=tuple(specs),
        lag_order=lag_order,
        calib=calib,
        advection=adv,
        fitted=fitted,
        train_mean=float(np.mean(y)),
        subhourly_exclusion=bool(subhourly),
        pool=pool,
    )


def gop_specs(pool):
    """Lag-0 NWP variable list of the spatial-only baseline."""
    return [
        FeatureSpec(var, 0, "site") for var in GOP_VARIABLES if var in pool.site_series
    ]


def fit_gop_roll(ds, cfg, pool, t_c, warm=None):
    """Spatial-only calibrated GP: lag-0 NWP regressors, no temporal kernel
    structure (temporal correlation exactly 1), no advection term."""
    return fit_roll(
        ds,
        cfg,
        pool,
        t_c,
        model=MODEL_GOP,
        warm=warm,
        spec_override=gop_specs(pool),
        lag_order_override=0,
        fixed={"lam": 1.0, "r_t": GOP_TEMPORAL_RANGE},
        advect=False,
        subhourly=False,
    )


def roll_forecast(state, ds, cfg, include_joint=False):
    """Predictive records for every (site, horizon) of one fitted roll."""
    t_c = state.issue_index
    target_rows = _target_rows(ds, t_c, cfg.horizon_steps)
    site_ids = np.array([sid for sid, _ in target_rows])
    t_idx = np.array([ti for _, ti in target_rows], dtype=int)
    mu = calibration.eval_mu(state.calib, state.pool, site_ids, t_idx)
    horizons = t_idx - t_c
    targets = PointSet.from_rows(list(ds.sites), target_rows)
    dist = gp.predict(
        state.fitted,
        targets,
        mu,
        mu_fallback=state.train_mean if state.subhourly_exclusion else None,
        horizons=horizons,
        include_joint=include_joint,
    )
    records = []
    for i, (sid, ti) in enumerate(target_rows):
        obs = ds.observations[sid]
        observed = float(obs.values[ti]) if obs.present[ti] else None
        mean = float(dist.mean[i])
        records.append(
            ForecastRecord(
                model=state.model,
                site=sid,
                issue=state.issue_time,
                horizon=int(horizons[i]),
                forecast=max(mean, 0.0),
                sd=float(np.sqrt(dist.variance[i])),
                observed=observed,
                mean_raw=mean,
            )
        )
    return records, dist


def persistence_forecast(ds, site_id, t_c, horizon):
    """Last observed value held constant; falls back to the latest earlier
    observation (flagged stale) when the origin itself is missing."""
    obs = ds.observations[site_id]
    t = t_c
    while t >= 0 and not obs.present[t]:
        t -= 1
    if t < 0:
        raise InsufficientDataError(
            f"no observation at or before t={t_c} for site {site_id}"
        )
    return float(obs.values[t]), t != t_c


def persistence_records(ds, t_c, horizon_steps, issue_time):
    records = []
    for site in ds.sites:
        value, stale = persistence_forecast(ds, site.id, t_c, 1)
        obs = ds.observations[site.id]
        for h in range(1, horizon_steps + 1):
            ti = t_c + h
            observed = float(obs.values[ti]) if obs.present[ti] else None
            records.append(
                ForecastRecord(
                    model=MODEL_PERSISTENCE,
                    site=site.id,
                    issue=issue_time,
                    horizon=h,
                    forecast=value,
                    observed=observed,
                    stale=stale,
                )
            )
    return records


def nwp_records(ds, t_c, horizon_steps, issue_time):
    """Raw spline-downscaled NWP wind speed as a point forecast."""
    records = []
    for site in ds.sites:
        wind = ds.nwp_for(site.id)["WIND_SPEED"]
        obs = ds.observations[site.id]
        for h in range(1, horizon_steps + 1):
            ti = t_c + h
            observed = float(obs.values[ti]) if obs.present[ti] else None
            records.append(
                ForecastRecord(
                    model=MODEL_NWP,
                    site=site.id,
                    issue=issue_time,
                    horizon=h,
                    forecast=float(wind[ti]),
                    observed=observed,
                )
            )
    return records


def gop_baseline(ds, cfg, pool, t_c, warm=None):
    """Records of the spatial-only baseline for one roll."""
    state = fit_gop_roll(ds, cfg, pool, t_c, warm=warm)
    records, _ = roll_forecast(state, ds, cfg)
    return records, state


def _roll_audit(states):
    import json

    audit = {}
    for state in states:
        params = state.fitted.params
        audit[state.model] = {
            "specs": [
                {"variable": s.variable, "lag": s.lag, "correlation": s.correlation}
                for s in state.specs
            ],
            "calibration": json.loads(calibration.model_to_json(state.calib)),
            "lag_order": state.lag_order,
            "kernel": {
                "alpha": params.alpha,
                "lambda": params.lam,
                "r_s": params.r_s,
                "r_t": params.r_t,
                "delta": params.delta,
                "beta0": params.beta0,
            },
            "advection": {
                "mean": params.advection.mean.tolist(),
                "cov": params.advection.cov.tolist(),
            },
            "loglik": state.fitted.loglik,
            "train_mean": state.train_mean,
        }
    return audit


def run_roll(ds, cfg, pool, t_c, warm=None):
    """All configured models for one forecast origin.

    Returns (records, audit, warm_params_for_next_roll).
    """
    issue_time = format_timestamp(ds.grid.time_at(t_c))
    records = []
    states = []
    next_warm = dict(warm or {})
    if MODEL_FULL in cfg.models:
        state = fit_roll(ds, cfg, pool, t_c, warm=(warm or {}).get(MODEL_FULL))
        roll_records, _ = roll_forecast(state, ds, cfg)
        records.extend(roll_records)
        states.append(state)
        next_warm[MODEL_FULL] = replace(state.fitted.params, beta0=0.0)
    if MODEL_GOP in cfg.models:
        gop_recs, gop_state = gop_baseline(
            ds, cfg, pool, t_c, warm=(warm or {}).get(MODEL_GOP)
        )
        records.extend(gop_recs)
        states.append(gop_state)
        next_warm[MODEL_GOP] = replace(gop_state.fitted.params, beta0=0.0)
    if MODEL_NWP in cfg.models:
        records.extend(nwp_records(ds, t_c, cfg.horizon_steps, issue_time))
    if MODEL_PERSISTENCE in cfg.models:
        records.extend(persistence_records(ds, t_c, cfg.horizon_steps, issue_time))
    return records, {"issue": issue_time, "t_index": t_c, "models": _roll_audit(states)}, next_warm


_WORKER = {}


def _worker_init(payload):
    _WORKER["ds"], _WORKER["cfg"] = payload
    _WORKER["pool"] = features.build_candidates(
        _WORKER["ds"], max_lag=_WORKER["cfg"].max_lag, diff_lags=_WORKER["cfg"].diff_lags
    )


def _worker_roll(t_c):
    ds, cfg, pool = _WORKER["ds"], _WORKER["cfg"], _WORKER["pool"]
    records, audit, _ = run_roll(ds, cfg, pool, t_c, warm=None)
    return records, audit


def run_backtest(ds, cfg, continue_on_error=False):
    """Roll over the dataset and emit records for every configured model.

    Serial runs warm-start each roll's optimizer from the previous optimum;
    parallel runs (cfg.jobs > 1) fit every roll from the standard starts so
    results do not depend on scheduling.  Returns (records, audits, failures).
    """
    issues = roll_issue_indices(ds.grid.length, cfg)
    records = []
    audits = []
    failures = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(
            max_workers=cfg.jobs, initializer=_worker_init, initargs=((ds, cfg),)
        ) as pool_exec:
            futures = [pool_exec.submit(_worker_roll, t_c) for t_c in issues]
            for t_c, future in zip(issues, futures):
                try:
                    roll_records, audit = future.result()
                except Exception as exc:
                    if not continue_on_error:
                        raise
                    log.error("roll t=%d failed: %s", t_c, exc)
                    failures.append((t_c, str(exc)))
                    continue
                records.extend(roll_records)
                audits.append(audit)
    else:
        pool = features.build_candidates(ds, max_lag=cfg.max_lag, diff_lags=cfg.diff_lags)
        warm = {}
        for t_c in issues:
            try:
                roll_records, audit, warm = run_roll(ds, cfg, pool, t_c, warm=warm)
            except Exception as exc:
                if not continue_on_error:
                    raise
                log.error("roll t=%d failed: %s", t_c, exc)
                failures.append((t_c, str(exc)))
                continue
            records.extend(roll_records)
            audits.append(audit)
    records.sort(key=lambda r: (r.model, r.site, r.issue, r.horizon))
    return records, audits, failures


def forecast_map(state, ds, cfg, mesh_lats, mesh_lons, horizon):
    """Predictive mean/sd on a lat-lon mesh at one look-ahead time.

    Mesh nodes become virtual sites assigned to their nearest NWP grid point;
    returns rows (lat, lon, mean, sd) in row-major mesh order.
    """
    if not 1 <= horizon <= cfg.horizon_steps:
        raise ValidationError(f"horizon must be in 1..{cfg.horizon_steps}")
    mesh_lats = np.asarray(mesh_lats, dtype=float)
    mesh_lons = np.asarray(mesh_lons, dtype=float)
    proj = ds.projection
    for lat in mesh_lats:
        for lon in mesh_lons:
            if not proj.contains(lat, lon):
                raise BoundsError(
                    f"mesh node ({lat}, {lon}) outside projection bbox {proj.bbox}"
                )
    nodes = []
    for i, lat in enumerate(mesh_lats):
        for j, lon in enumerate(mesh_lons):
            x, y = proj.to_xy(lat, lon)
            nodes.append(Site(id=f"node_{i}_{j}", lat=lat, lon=lon, x=float(x), y=float(y)))
    pool = state.pool
    for node in nodes:
        dists = [
            ((node.x - g.x) ** 2 + (node.y - g.y) ** 2, g.id) for g in ds.nwp_sites
        ]
        pool.add_virtual_site(node, min(dists)[1])
    ti = state.issue_index + horizon
    site_ids = np.array([n.id for n in nodes])
    t_idx = np.full(len(nodes), ti, dtype=int)
    mu = calibration.eval_mu(state.calib, pool, site_ids, t_idx)
    targets = PointSet(
        x=np.array([n.x for n in nodes]),
        y=np.array([n.y for n in nodes]),
        t=t_idx.astype(float),
        site_code=np.arange(len(nodes), dtype=np.int64) + len(ds.sites),
        site_ids=tuple(n.id for n in nodes),
    )
    dist = gp.predict(
        state.fitted,
        targets,
        mu,
        mu_fallback=state.train_mean if state.subhourly_exclusion else None,
        horizons=np.full(len(nodes), horizon),
    )
    rows = []
    k = 0
    for lat in mesh_lats:
        for lon in mesh_lons:
            rows.append((float(lat), float(lon), float(dist.mean[k]), float(np.sqrt(dist.variance[k]))))
            k += 1
    return rows

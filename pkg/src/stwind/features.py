"""Derived physical predictors and dynamic feature selection.

Builds spatio-temporal pressure differentials and geostrophic wind from the
interpolated NWP series, assembles the lagged candidate pool, and selects the
regressor set per forecast roll: Pearson screening for the exogenous features
plus a PACF rule for the lag order of the NWP wind-speed terms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    FeatureInputError,
    InsufficientDataError,
    ValidationError,
)

log = logging.getLogger(__name__)

GRAVITY = 9.80665  # m/s^2
EARTH_ROTATION = 7.2921e-5  # rad/s
GAS_CONSTANT_DRY = 287.0  # J K^-1 kg^-1
REFERENCE_PRESSURE_HPA = 850.0
MIN_LATITUDE_DEG = 5.0

#: default lag window: 4 hours in 10-min steps, both directions
MAX_LAG = 24
#: pressure-differential time offsets scanned, both directions
DIFF_MAX_LAG = 6
MIN_OVERLAP = 30
PACF_MIN_SAMPLES = 100
PACF_FALLBACK_LAG = 6

VAR_PRESSURE_DIFF = "PRESSURE_DIFF"
VAR_GEOSTROPHIC = "GEOSTROPHIC"
#: NWP variables admitted directly into the candidate pool
DIRECT_FAMILIES = ("HUMIDITY", "PRESSURE", "TEMP", "U", "V", "WINDGUST")


def shifted(values, lag):
    """values[t + lag] with NaN where the index leaves the array."""
    values = np.asarray(values, dtype=float)
    out = np.full_like(values, np.nan)
    n = values.size
    if lag >= 0:
        if lag < n:
            out[: n - lag] = values[lag:]
    else:
        out[-lag:] = values[: n + lag]
    return out


@dataclass(frozen=True)
class GeostrophicInputs:
    """Per-barometer inputs for the geopotential-height surface fit."""

    pressure_hpa: np.ndarray
    temperature_k: np.ndarray
    lat_deg: np.ndarray
    x_km: np.ndarray
    y_km: np.ndarray
    base_height_m: np.ndarray | None = None

    def __post_init__(self):
        for name in ("pressure_hpa", "temperature_k", "lat_deg", "x_km", "y_km"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.base_height_m is None:
            object.__setattr__(self, "base_height_m", np.zeros_like(self.pressure_hpa))
        else:
            object.__setattr__(
                self, "base_height_m", np.asarray(self.base_height_m, dtype=float)
            )
        if np.any(self.pressure_hpa <= 0):
            raise ValidationError("pressure must be positive")
        if np.any(self.temperature_k <= 0):
            raise ValidationError("temperature must be positive")
        if np.any(np.abs(self.lat_deg) < MIN_LATITUDE_DEG):
            raise DegenerateGeometryError(
                f"latitude within {MIN_LATITUDE_DEG} deg of the equator"
            )


def geopotential_height(inputs):
    """Hydrostatic height of each barometer relative to the reference pressure."""
    return inputs.base_height_m + (
        GAS_CONSTANT_DRY * inputs.temperature_k / GRAVITY
    ) * np.log(inputs.pressure_hpa / REFERENCE_PRESSURE_HPA)


@dataclass(frozen=True)
class PlaneFit:
    """Least-squares plane h = c0 + c1*x + c2*y over the stations (km units)."""

    c0: float
    c1: float
    c2: float
    residual: float


def fit_height_plane(x_km, y_km, heights):
    x = np.asarray(x_km, dtype=float)
    y = np.asarray(y_km, dtype=float)
    h = np.asarray(heights, dtype=float)
    if x.size < 3:
        raise DegenerateGeometryError(f"plane fit needs >= 3 stations, got {x.size}")
    coords = np.column_stack([x - x.mean(), y - y.mean()])
    if np.linalg.matrix_rank(coords, tol=1e-9 * max(1.0, np.abs(coords).max())) < 2:
        raise DegenerateGeometryError("stations are collinear")
    design = np.column_stack([np.ones_like(x), x, y])
    coef, _, _, _ = np.linalg.lstsq(design, h, rcond=None)
    residual = float(np.linalg.norm(design @ coef - h))
    return PlaneFit(c0=float(coef[0]), c1=float(coef[1]), c2=float(coef[2]), residual=residual)


def geostrophic_components(plane, lat_deg):
    """(east, north) balanced-flow components from a height plane, m/s.

    Plane gradients are per km; the 1e-3 factor converts them to per metre.
    """
    coef = GRAVITY / (2.0 * EARTH_ROTATION * math.sin(math.radians(lat_deg)))
    u = -coef * plane.c2 * 1e-3
    v = coef * plane.c1 * 1e-3
    return u, v


def geostrophic_wind(inputs):
    """Balanced-flow speed per station from the fitted height surface."""
    heights = geopotential_height(inputs)
    plane = fit_height_plane(inputs.x_km, inputs.y_km, heights)
    speeds = np.empty(inputs.lat_deg.size)
    for i, lat in enumerate(inputs.lat_deg):
        u, v = geostrophic_components(plane, lat)
        speeds[i] = math.hypot(u, v)
    return speeds


def pressure_differential(ds, site_i, site_j, lag):
    """P(i, t) - P(j, t + lag) on the dataset grid; shifted ends are NaN."""
    for sid in (site_i, site_j):
        if sid not in ds.nwp or "PRESSURE" not in ds.nwp[sid]:
            raise FeatureInputError(f"no pressure series for NWP site {sid}")
    return ds.nwp[site_i]["PRESSURE"] - shifted(ds.nwp[site_j]["PRESSURE"], lag)


def _height_gradient_series(ds):
    """(c1(t), c2(t)) of the height plane over all NWP grid points."""
    sites = ds.nwp_sites
    if len(sites) < 3:
        raise FeatureInputError(
            f"geostrophic wind needs >= 3 NWP grid points, got {len(sites)}"
        )
    for s in sites:
        if abs(s.lat) < MIN_LATITUDE_DEG:
            raise DegenerateGeometryError(
                f"NWP site {s.id} within {MIN_LATITUDE_DEG} deg of the equator"
            )
        for var in ("PRESSURE", "TEMP"):
            if var not in ds.nwp[s.id]:
                raise FeatureInputError(f"NWP site {s.id} lacks {var}")
    x = np.array([s.x for s in sites])
    y = np.array([s.y for s in sites])
    coords = np.column_stack([x - x.mean(), y - y.mean()])
    if np.linalg.matrix_rank(coords, tol=1e-9 * max(1.0, np.abs(coords).max())) < 2:
        raise DegenerateGeometryError("NWP grid points are collinear")
    pressure = np.vstack([ds.nwp[s.id]["PRESSURE"] for s in sites])
    temperature = np.vstack([ds.nwp[s.id]["TEMP"] for s in sites])
    heights = (GAS_CONSTANT_DRY * temperature / GRAVITY) * np.log(
        pressure / REFERENCE_PRESSURE_HPA
    )
    design = np.column_stack([np.ones_like(x), x, y])
    coef = np.linalg.pinv(design) @ heights  # (3, n_steps)
    return coef[1], coef[2]


def geostrophic_speed_for_lat(c1, c2, lat_deg):
    coef = GRAVITY * 1e-3 / (2.0 * EARTH_ROTATION * abs(math.sin(math.radians(lat_deg))))
    return coef * np.hypot(c1, c2)


@dataclass(frozen=True)
class FeatureSpec:
    """One selected regressor: a variable at a single signed lag."""

    variable: str
    lag: int
    scope: str  # "site" or "global"
    correlation: float | None = None

    def __post_init__(self):
        if abs(self.lag) > MAX_LAG:
            raise ValidationError(f"|lag| must be <= {MAX_LAG}")

    def key(self):
        return (self.variable, self.lag)


class CandidatePool:
    """Per-family candidate series with lagged-variant access.

    Site-scope families store one base series per site (variant = shift);
    the global pressure-differential family stores one series per offset.
    """

    def __init__(self, ds, max_lag=MAX_LAG, diff_lags=DIFF_MAX_LAG):
        self.ds = ds
        self.max_lag = max_lag
        self.site_series: dict[str, dict[str, np.ndarray]] = {}
        self.global_series: dict[str, dict[int, np.ndarray]] = {}
        self._virtual: dict[str, tuple[str, float]] = {}  # site -> (source, lat)

        available = set.intersection(*(set(v) for v in ds.nwp.values())) if ds.nwp else set()
        for var in DIRECT_FAMILIES:
            if var not in available:
                log.warning("candidate pool: NWP variable %s unavailable, family dropped", var)
                continue
            self.site_series[var] = {
                site.id: ds.nwp_for(site.id)[var] for site in ds.sites
            }

        try:
            i, j = self._most_distant_pair(ds.nwp_sites)
            self.global_series[VAR_PRESSURE_DIFF] = {
                d: pressure_differential(ds, i, j, d) for d in range(-diff_lags, diff_lags + 1)
            }
            self.diff_pair = (i, j)
        except FeatureInputError as exc:
            log.warning("candidate pool: pressure differential dropped (%s)", exc)
            self.diff_pair = None

        self._grad = None
        try:
            self._grad = _height_gradient_series(ds)
            self.site_series[VAR_GEOSTROPHIC] = {
                site.id: geostrophic_speed_for_lat(*self._grad, site.lat)
                for site in ds.sites
            }
        except (FeatureInputError, DegenerateGeometryError) as exc:
            log.warning("candidate pool: geostrophic wind dropped (%s)", exc)

    @staticmethod
    def _most_distant_pair(sites):
        if len(sites) < 2:
            raise FeatureInputError("pressure differential needs two NWP grid points")
        best = None
        for a in range(len(sites)):
            for b in range(a + 1, len(sites)):
                d = math.hypot(sites[a].x - sites[b].x, sites[a].y - sites[b].y)
                if best is None or d > best[0]:
                    best = (d, sites[a].id, sites[b].id)
        return best[1], best[2]

    def family_names(self):
        return tuple(sorted(self.site_series)) + tuple(sorted(self.global_series))

    def lags_for(self, variable):
        if variable in self.global_series:
            return tuple(sorted(self.global_series[variable]))
        return tuple(range(-self.max_lag, self.max_lag + 1))

    def scope_of(self, variable):
        return "global" if variable in self.global_series else "site"

    def add_virtual_site(self, site, source_id):
        """Register an off-grid site (e.g. a forecast-map node) so per-site
        features resolve against its assigned NWP source."""
        self._virtual[site.id] = (source_id, site.lat)
        for var in self.site_series:
            if var == VAR_GEOSTROPHIC:
                self.site_series[var][site.id] = geostrophic_speed_for_lat(
                    *self._grad, site.lat
                )
            else:
                self.site_series[var][site.id] = self.ds.nwp[source_id][var]

    def nwp_wind(self, site_id):
        if site_id in self._virtual:
            return self.ds.nwp[self._virtual[site_id][0]]["WIND_SPEED"]
        return self.ds.nwp_for(site_id)["WIND_SPEED"]

    def variant(self, variable, site_id, lag):
        """Lagged candidate series, aligned to the dataset grid."""
        if variable in self.global_series:
            series = self.global_series[variable]
            if lag not in series:
                raise FeatureInputError(f"{variable} has no offset {lag}")
            return series[lag]
        if variable not in self.site_series:
            raise FeatureInputError(f"unknown candidate family {variable}")
        return shifted(self.site_series[variable][site_id], lag)

    def values_at(self, spec, site_ids, t_idx):
        """Column of spec values at (site, time-index) rows; NaN off-grid."""
        t_idx = np.asarray(t_idx)
        out = np.full(t_idx.size, np.nan)
        n = self.ds.grid.length
        if spec.scope == "global":
            series = self.global_series[spec.variable][spec.lag]
            ok = (t_idx >= 0) & (t_idx < n)
            out[ok] = series[t_idx[ok]]
            return out
        shifted_t = t_idx + spec.lag
        ok = (shifted_t >= 0) & (shifted_t < n)
        for sid in set(site_ids):
            series = self.site_series[spec.variable][sid]
            mask = ok & (np.asarray(site_ids) == sid)
            out[mask] = series[shifted_t[mask]]
        return out


def build_candidates(ds, max_lag=MAX_LAG, diff_lags=DIFF_MAX_LAG):
    """Candidate pool over the eight feature families (fewer with a warning
    when an input variable is unavailable)."""
    return CandidatePool(ds, max_lag=max_lag, diff_lags=diff_lags)


def pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return None
    return float(a @ b) / denom


def select_features(pool, target, rows, threshold=0.6, target_rows=None,
                    min_overlap=MIN_OVERLAP):
    """Pick at most one lag per family by maximal |Pearson correlation|.

    `rows` are training (site_id, time-index) pairs and `target` the matching
    response values; a family enters the model only if its best lagged variant
    reaches the threshold.  When `target_rows` is given, lags that cannot be
    evaluated at every forecast point are excluded up front.
    """
    target = np.asarray(target, dtype=float)
    site_ids = np.array([sid for sid, _ in rows])
    t_idx = np.array([ti for _, ti in rows], dtype=int)
    if target.size != t_idx.size:
        raise ValidationError("target length must match rows")
    n = pool.ds.grid.length
    t_min, t_max = None, None
    if target_rows is not None:
        fut = np.array([ti for _, ti in target_rows], dtype=int)
        t_min, t_max = int(fut.min()), int(fut.max())

    specs = []
    for variable in pool.family_names():
        scope = pool.scope_of(variable)
        best = None  # (|r|, r, lag)
        for lag in pool.lags_for(variable):
            # a lagged variant must be evaluable at every forecast point
            if t_min is not None and (t_max + lag > n - 1 or t_min + lag < 0):
                continue
            column = pool.values_at(
                FeatureSpec(variable, lag, scope), site_ids, t_idx
            )
            ok = np.isfinite(column) & np.isfinite(target)
            if int(ok.sum()) < min_overlap:
                continue
            r = pearson(column[ok], target[ok])
            if r is None:
                log.warning("select_features: %s lag %d has zero variance", variable, lag)
                continue
            if best is None or abs(r) > best[0]:
                best = (abs(r), r, lag)
        if best is not None and best[0] >= threshold:
            specs.append(
                FeatureSpec(variable, best[2], scope, correlation=best[1])
            )
    return specs


def pacf_lag_order(values, max_lag=MAX_LAG, min_samples=PACF_MIN_SAMPLES):
    """Lag order for the NWP wind-speed terms from the PACF cut-off.

    Counts the leading run of lags whose partial autocorrelation magnitude
    exceeds the 1.96/sqrt(N) band, on the longest gap-free stretch of the
    series; never below 1 (the lag-0 term is always present).
    """
    values = np.asarray(values, dtype=float)
    run = _longest_finite_run(values)
    if run.size < min_samples:
        log.warning(
            "pacf_lag_order: %d gap-free samples < %d, falling back to lag %d",
            run.size,
            min_samples,
            PACF_FALLBACK_LAG,
        )
        return PACF_FALLBACK_LAG
    from statsmodels.tsa.stattools import pacf

    nlags = min(max_lag, run.size // 2 - 1)
    coefs = pacf(run, nlags=nlags, method="ywadjusted")
    band = 1.96 / math.sqrt(run.size)
    order = 0
    for k in range(1, nlags + 1):
        if abs(coefs[k]) > band:
            order = k
        else:
            break
    return max(order, 1)


def _longest_finite_run(values):
    finite = np.isfinite(values)
    best_lo = best_hi = lo = 0
    for i, ok in enumerate(finite):
        if not ok:
            lo = i + 1
            continue
        if i + 1 - lo > best_hi - best_lo:
            best_lo, best_hi = lo, i + 1
    return values[best_lo:best_hi]


def lag_order_for_dataset(ds, t_lo, t_hi, max_lag=MAX_LAG):
    """Combined lag order over sites: the most demanding per-site PACF rule."""
    orders = []
    for site in ds.sites:
        series = ds.observations[site.id].values[t_lo : t_hi + 1]
        orders.append(pacf_lag_order(series, max_lag=max_lag))
    if not orders:
        raise InsufficientDataError("no observation series for lag-order estimation")
    return max(orders)

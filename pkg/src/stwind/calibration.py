"""NWP calibration: the slow-scale part of the forecast.

Fits a linear correction of the interpolated NWP wind speed against local
observations: lagged NWP wind-speed terms (additive), selected exogenous
features (additive), and feature-by-wind interactions (multiplicative), by
ordinary least squares with rank-deficient columns zeroed and flagged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import EvaluationError, InsufficientDataError, UnderdeterminedError, ValidationError
from .features import FeatureSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationModel:
    intercept: float
    a: np.ndarray  # lagged NWP wind-speed coefficients, lag 0..lag_order
    b: np.ndarray  # feature coefficients
    c: np.ndarray  # feature-x-wind interaction coefficients
    lag_order: int
    specs: tuple[FeatureSpec, ...]
    cond: float  # design-matrix condition number
    dropped: tuple[int, ...]  # zeroed design columns (rank deficiency)
    n_rows: int

    def __post_init__(self):
        m = len(self.specs)
        if self.a.shape != (self.lag_order + 1,):
            raise ValidationError("wind-lag coefficient length must be lag_order + 1")
        if self.b.shape != (m,) or self.c.shape != (m,):
            raise ValidationError("feature coefficient lengths must match specs")
        full = np.concatenate([[self.intercept], self.a, self.b, self.c])
        if not np.all(np.isfinite(full)):
            raise ValidationError("calibration coefficients must be finite")

    def coefficients(self):
        """Full coefficient vector in design-column order."""
        return np.concatenate([[self.intercept], self.a, self.b, self.c])


def build_design(pool, specs, lag_order, site_ids, t_idx):
    """Design rows at (site, time-index) points.

    Columns: [1, wind(t), .., wind(t - lag_order), features, features*wind(t)].
    Returns (matrix, valid_row_mask); rows with any unavailable entry are
    flagged invalid rather than dropped so callers control alignment.
    """
    site_ids = np.asarray(site_ids)
    t_idx = np.asarray(t_idx, dtype=int)
    n = t_idx.size
    wind_cols = np.full((n, lag_order + 1), np.nan)
    grid_len = pool.ds.grid.length
    for sid in set(site_ids.tolist()):
        wind = pool.nwp_wind(sid)
        mask = site_ids == sid
        for k in range(lag_order + 1):
            tk = t_idx[mask] - k
            ok = (tk >= 0) & (tk < grid_len)
            col = np.full(int(mask.sum()), np.nan)
            col[ok] = wind[tk[ok]]
            wind_cols[mask, k] = col
    feature_cols = np.column_stack(
        [pool.values_at(spec, site_ids, t_idx) for spec in specs]
    ) if specs else np.empty((n, 0))
    interaction = feature_cols * wind_cols[:, :1] if specs else np.empty((n, 0))
    x = np.column_stack([np.ones(n), wind_cols, feature_cols, interaction])
    valid = np.all(np.isfinite(x), axis=1)
    return x, valid


def fit_mu(x, y, specs, lag_order):
    """Ordinary least squares with rank-revealing column handling.

    Dependent columns (pivoted QR rank test) get zero coefficients and are
    reported in `dropped`; the remaining system is solved by lstsq.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("design matrix and targets must be finite")
    rows, cols = x.shape
    if y.shape != (rows,):
        raise ValidationError("targets must align with design rows")
    if rows < cols:
        raise UnderdeterminedError(f"{rows} rows < {cols} columns")
    if rows < 5 * cols:
        log.warning("calibration fit has only %d rows for %d columns", rows, cols)

    _, r, pivot = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(rows, cols) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol)) if diag.size else 0
    keep = np.sort(pivot[:rank])
    dropped = tuple(int(i) for i in np.sort(pivot[rank:]))
    if dropped:
        log.warning("calibration fit dropped rank-deficient columns %s", dropped)

    coef = np.zeros(cols)
    coef[keep], _, _, sv = np.linalg.lstsq(x[:, keep], y, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf

    m = len(specs)
    return CalibrationModel(
        intercept=float(coef[0]),
        a=coef[1 : lag_order + 2].copy(),
        b=coef[lag_order + 2 : lag_order + 2 + m].copy(),
        c=coef[lag_order + 2 + m :].copy(),
        lag_order=lag_order,
        specs=tuple(specs),
        cond=cond,
        dropped=dropped,
        n_rows=rows,
    )


def eval_mu(model, pool, site_ids, t_idx):
    """Calibration term at the requested points; raises when a selected
    feature is not computable there."""
    x, valid = build_design(pool, model.specs, model.lag_order, site_ids, t_idx)
    if not np.all(valid):
        bad_row = int(np.argmin(valid))
        row = x[bad_row]
        labels = design_column_labels(model)
        bad_col = int(np.argmax(~np.isfinite(row)))
        raise EvaluationError(
            f"feature {labels[bad_col]} not computable at "
            f"({site_ids[bad_row]}, t={t_idx[bad_row]})"
        )
    return x @ model.coefficients()


def design_column_labels(model):
    labels = ["intercept"]
    labels += [f"wind_lag{-k}" for k in range(model.lag_order + 1)]
    labels += [f"{s.variable}@{s.lag}" for s in model.specs]
    labels += [f"{s.variable}@{s.lag}*wind" for s in model.specs]
    return labels


def residuals(model, pool, ds, t_lo, t_hi):
    """z = y - mu over the window, per site; missing targets stay missing.

    Rows where a model feature is not computable (window edges under lagging)
    are dropped like missing targets.  Returns (rows, z) with rows the
    surviving (site_id, time-index) pairs.
    """
    if t_hi < t_lo:
        raise ValidationError("window end precedes start")
    rows = []
    values = []
    any_overlap = False
    coef = model.coefficients()
    for site in ds.sites:
        obs = ds.observations[site.id]
        t = np.arange(t_lo, t_hi + 1)
        present = obs.present[t_lo : t_hi + 1]
        if not np.any(present):
            continue
        any_overlap = True
        sid = np.repeat(site.id, int(present.sum()))
        x, valid = build_design(pool, model.specs, model.lag_order, sid, t[present])
        mu = x[valid] @ coef
        z = obs.values[t_lo : t_hi + 1][present][valid] - mu
        rows.extend((site.id, int(ti)) for ti in t[present][valid])
        values.extend(z.tolist())
    if not any_overlap:
        raise InsufficientDataError("no observations overlap the window")
    return rows, np.array(values)


def model_to_json(model):
    """Audit form: coefficients keyed by the spec they multiply."""
    doc = {
        "intercept": model.intercept,
        "wind_lags": {f"lag{-k}": float(v) for k, v in enumerate(model.a)},
        "features": {
            f"{s.variable}@{s.lag}": {
                "additive": float(b),
                "interaction": float(c),
                "correlation": s.correlation,
            }
            for s, b, c in zip(model.specs, model.b, model.c)
        },
        "lag_order": model.lag_order,
        "condition_number": model.cond,
        "dropped_columns": list(model.dropped),
        "rows": model.n_rows,
    }
    return json.dumps(doc, sort_keys=True, indent=2)

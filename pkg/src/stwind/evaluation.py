"""Forecast verification and wind-power scoring.

Point scores (MAE by hourly bucket with percent improvement), the closed-form
Gaussian CRPS, power-curve construction by the method of bins, and the
asymmetric power-curve error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

SQRT_PI = math.sqrt(math.pi)
HOURS_PER_HORIZON = 6  # 10-min steps per hourly bucket
PCE_G_VALUES = (0.5, 0.6, 0.7, 0.73, 0.8)


@dataclass
class ForecastRecord:
    """One (model, site, issue, horizon) test instance."""

    model: str
    site: str
    issue: str  # ISO timestamp of the forecast origin
    horizon: int  # look-ahead in 10-min steps, 1-based
    forecast: float  # reported point forecast, clamped at 0 m/s
    sd: float | None = None
    observed: float | None = None
    #: pre-clamp predictive mean, kept for CRPS; not serialized
    mean_raw: float | None = field(default=None, repr=False)
    stale: bool = False

    def __post_init__(self):
        if not (1 <= self.horizon):
            raise ValidationError("horizon must be >= 1")
        if self.sd is not None and self.sd < 0:
            raise ValidationError("sd must be >= 0")

    def crps_mean(self):
        return self.forecast if self.mean_raw is None else self.mean_raw


def hour_bucket(horizon):
    """Bucket b covers horizons 6(b-1)+1 .. 6b."""
    return (int(horizon) + HOURS_PER_HORIZON - 1) // HOURS_PER_HORIZON


def expected_record_count(rolls, horizon_steps, n_sites):
    """Records per model emitted by a backtest: rolls x horizons x sites."""
    return int(rolls) * int(horizon_steps) * int(n_sites)


def percent_improvement(baseline_avg, model_avg):
    """(baseline - model) / baseline, in percent."""
    if baseline_avg == 0:
        raise ValidationError("baseline average is zero")
    return 100.0 * (baseline_avg - model_avg) / baseline_avg


def crps_gaussian(mean, sd, observed):
    """Closed-form CRPS of a Gaussian forecast; |error| in the sd -> 0 limit."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if np.any(sd < 0):
        raise ValidationError("sd must be >= 0")
    err = np.abs(observed - mean)
    zeta = np.where(sd > 0, (observed - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    phi = np.exp(-0.5 * zeta * zeta) / math.sqrt(2.0 * math.pi)
    value = sd * (zeta * (2.0 * ndtr(zeta) - 1.0) + 2.0 * phi - 1.0 / SQRT_PI)
    out = np.where(sd > 0, value, err)
    return float(out) if out.ndim == 0 else out


def mae_table(records, models=None, by_site=True):
    """MAE per hourly bucket, an Average row, and percent improvement of the
    first model over each other model.

    Returns {site: {"buckets": {b: {model: mae}}, "average": {model: mae},
    "improvement": {model: pct}}}; empty groups are omitted.
    """
    scored = [r for r in records if r.observed is not None]
    if models is None:
        models = sorted({r.model for r in scored})
    sites = sorted({r.site for r in scored}) if by_site else ["all"]
    out = {}
    for site in sites:
        rows = scored if site == "all" else [r for r in scored if r.site == site]
        buckets: dict[int, dict[str, float]] = {}
        average = {}
        for model in models:
            errs = {}
            for r in rows:
                if r.model != model:
                    continue
                errs.setdefault(hour_bucket(r.horizon), []).append(
                    abs(r.forecast - r.observed)
                )
            for b, values in sorted(errs.items()):
                buckets.setdefault(b, {})[model] = float(np.mean(values))
            all_errs = [e for values in errs.values() for e in values]
            if all_errs:
                average[model] = float(np.mean(all_errs))
        improvement = {}
        if models and models[0] in average:
            for model in models[1:]:
                if model in average and average[model] > 0:
                    improvement[model] = percent_improvement(
                        average[model], average[models[0]]
                    )
        out[site] = {"buckets": buckets, "average": average, "improvement": improvement}
    return out


def crps_table(records, models=None, by_site=True):
    """Same layout as mae_table for probabilistic models (records with sd)."""
    scored = [r for r in records if r.observed is not None and r.sd is not None]
    if models is None:
        models = sorted({r.model for r in scored})
    sites = sorted({r.site for r in scored}) if by_site else ["all"]
    out = {}
    for site in sites:
        rows = scored if site == "all" else [r for r in scored if r.site == site]
        buckets: dict[int, dict[str, float]] = {}
        average = {}
        for model in models:
            vals = {}
            for r in rows:
                if r.model != model:
                    continue
                vals.setdefault(hour_bucket(r.horizon), []).append(
                    crps_gaussian(r.crps_mean(), r.sd, r.observed)
                )
            for b, values in sorted(vals.items()):
                buckets.setdefault(b, {})[model] = float(np.mean(values))
            all_vals = [v for values in vals.values() for v in values]
            if all_vals:
                average[model] = float(np.mean(all_vals))
        improvement = {}
        if models and models[0] in average:
            for model in models[1:]:
                if model in average and average[model] > 0:
                    improvement[model] = percent_improvement(
                        average[model], average[models[0]]
                    )
        out[site] = {"buckets": buckets, "average": average, "improvement": improvement}
    return out


@dataclass(frozen=True)
class PowerCurve:
    """Normalized power vs wind speed: bin means joined piecewise-linearly."""

    bin_width: float
    centers: np.ndarray  # occupied-bin centers, m/s
    power: np.ndarray  # mean normalized power per occupied bin, in [0, 1]

    def __call__(self, speed):
        speed = np.asarray(speed, dtype=float)
        out = np.interp(speed, self.centers, self.power)
        return float(out) if out.ndim == 0 else out


def power_curve_from_bins(speeds, powers, bin_width=0.5):
    """Method of bins: mean normalized power per fixed-width speed bin.

    Interpolation is linear between occupied bin centers and constant beyond
    the first/last occupied bin.
    """
    speeds = np.asarray(speeds, dtype=float)
    powers = np.asarray(powers, dtype=float)
    if speeds.size == 0:
        raise ValidationError("no speed-power pairs")
    if speeds.shape != powers.shape:
        raise ValidationError("speeds and powers must align")
    if np.any(powers < 0) or np.any(powers > 1):
        raise ValidationError("normalized power must lie in [0, 1]")
    if np.any(speeds < 0):
        raise ValidationError("speeds must be >= 0")
    index = np.floor(speeds / bin_width).astype(int)
    centers = []
    means = []
    for k in sorted(set(index.tolist())):
        mask = index == k
        centers.append((k + 0.5) * bin_width)
        means.append(float(powers[mask].mean()))
    return PowerCurve(
        bin_width=bin_width, centers=np.array(centers), power=np.array(means)
    )


def pce(power_obs, power_fcst, speed_obs, speed_fcst, g):
    """Asymmetric power loss: weight g on speed under-prediction
    (forecast <= observed), 1-g on over-prediction."""
    if not 0.0 < g < 1.0:
        raise ValidationError("g must be in (0, 1)")
    power_obs = np.asarray(power_obs, dtype=float)
    power_fcst = np.asarray(power_fcst, dtype=float)
    speed_obs = np.asarray(speed_obs, dtype=float)
    speed_fcst = np.asarray(speed_fcst, dtype=float)
    under = speed_fcst <= speed_obs
    out = np.where(
        under, g * (power_obs - power_fcst), (1.0 - g) * (power_fcst - power_obs)
    )
    return float(out) if out.ndim == 0 else out


def pce_table(records, curve, g_values=PCE_G_VALUES, models=None, by_site=True):
    """Average PCE per g value after converting speeds through the curve."""
    scored = [r for r in records if r.observed is not None]
    if models is None:
        models = sorted({r.model for r in scored})
    sites = sorted({r.site for r in scored}) if by_site else ["all"]
    out = {}
    for site in sites:
        rows = scored if site == "all" else [r for r in scored if r.site == site]
        table = {}
        for g in g_values:
            per_model = {}
            for model in models:
                sel = [r for r in rows if r.model == model]
                if not sel:
                    continue
                speed_fcst = np.array([r.forecast for r in sel])
                speed_obs = np.array([r.observed for r in sel])
                per_model[model] = float(
                    np.mean(
                        pce(curve(speed_obs), curve(speed_fcst), speed_obs, speed_fcst, g)
                    )
                )
            table[g] = per_model
        out[site] = table
    return out


RECORD_COLUMNS = ("model", "site", "issue_time", "horizon_min", "forecast", "sd", "observed")


def write_records_csv(path, records):
    """`model,site,issue_time,horizon_min,forecast,sd,observed`, sorted."""
    ordered = sorted(records, key=lambda r: (r.model, r.site, r.issue, r.horizon))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in ordered:
            writer.writerow(
                [
                    r.model,
                    r.site,
                    r.issue,
                    r.horizon * 10,
                    f"{r.forecast:.6f}",
                    "" if r.sd is None else f"{r.sd:.6f}",
                    "" if r.observed is None else f"{r.observed:.6f}",
                ]
            )


def read_records_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RECORD_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"records file lacks columns {sorted(missing)}")
        for row in reader:
            records.append(
                ForecastRecord(
                    model=row["model"],
                    site=row["site"],
                    issue=row["issue_time"],
                    horizon=int(row["horizon_min"]) // 10,
                    forecast=float(row["forecast"]),
                    sd=float(row["sd"]) if row["sd"] else None,
                    observed=float(row["observed"]) if row["observed"] else None,
                )
            )
    return records


def write_metric_csv(path, table, models, label):
    """Hourly-bucket metric CSV: rows 1..6, then Average and %Improvement."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([label] + list(models))
        max_bucket = max(table["buckets"], default=0)
        for b in range(1, max_bucket + 1):
            row = [b]
            for model in models:
                value = table["buckets"].get(b, {}).get(model)
                row.append("" if value is None else f"{value:.4f}")
            writer.writerow(row)
        row = ["Average"]
        for model in models:
            value = table["average"].get(model)
            row.append("" if value is None else f"{value:.4f}")
        writer.writerow(row)
        row = ["%Improvement"]
        for model in models:
            if model == models[0]:
                row.append("-")
            else:
                value = table["improvement"].get(model)
                row.append("" if value is None else f"{value:.1f}%")
        writer.writerow(row)


def write_pce_csv(path, table, models):
    """Table 4-shaped CSV: one row per g value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["g"] + list(models))
        for g, per_model in table.items():
            row = [g]
            for model in models:
                value = per_model.get(model)
                row.append("" if value is None else f"{value:.4f}")
            writer.writerow(row)

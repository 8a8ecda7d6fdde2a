"""Gaussian-process core.

Marginal likelihood with the process mean profiled out by generalized least
squares, derivative-free hyperparameter estimation under box constraints,
universal-kriging prediction with mean-estimation variance inflation, joint
trajectory sampling, and a dense field simulator that doubles as the
estimation oracle in tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .errors import FitError, NumericalError, SizeLimitError, ValidationError
from .kernels import KernelParams, PointSet, covariance_matrix, cross_covariance, kernel_values

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
DENSE_LIMIT = 3000

#: box constraints for (alpha, lam, r_s, r_t, delta) during estimation
FIT_BOUNDS = {
    "alpha": (1e-6, 1e4),
    "lam": (0.0, 1.0),
    "r_s": (1e-2, 1e5),
    "r_t": (1e-2, 1e5),
    "delta": (1e-9, 1e3),
}


def chol_with_jitter(k):
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 * mean(diag) and grows tenfold up to 1e-4 *
    mean(diag); every escalation is logged.  Returns (L, jitter_used).
    """
    mean_diag = float(np.mean(np.diag(k)))
    if not np.isfinite(mean_diag) or mean_diag <= 0:
        raise NumericalError(f"covariance diagonal mean {mean_diag} is not positive")
    jitter = 0.0
    while True:
        try:
            shifted = k if jitter == 0.0 else k + jitter * mean_diag * np.eye(k.shape[0])
            return linalg.cholesky(shifted, lower=True), jitter
        except linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX:
                cond = np.linalg.cond(k)
                raise NumericalError(
                    f"factorization failed at max jitter; condition estimate {cond:.3e}"
                ) from None
            log.debug("cholesky jitter escalated to %g * mean diagonal", jitter)


def _gls_parts(l_factor, z):
    """Solve for the profiled mean: returns (beta0, resid, alpha_solve, one_solve, s1).

    alpha_solve = K^-1 (z - beta0*1), one_solve = K^-1 1, s1 = 1^T K^-1 1.
    """
    n = z.size
    ones = np.ones(n)
    zi = linalg.cho_solve((l_factor, True), z)
    oi = linalg.cho_solve((l_factor, True), ones)
    s1 = float(ones @ oi)
    beta0 = float(ones @ zi) / s1
    resid = z - beta0
    return beta0, resid, zi - beta0 * oi, oi, s1


def log_marginal_likelihood(z, points, params):
    """Gaussian log-density of the residuals under the combined kernel, with
    the constant mean profiled out by GLS at every evaluation."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != len(points):
        raise ValidationError("residual vector and point set differ in length")
    k = covariance_matrix(points, params)
    l_factor, _ = chol_with_jitter(k)
    _, resid, alpha_solve, _, _ = _gls_parts(l_factor, z)
    quad = float(resid @ alpha_solve)
    logdet = 2.0 * float(np.sum(np.log(np.diag(l_factor))))
    return -0.5 * quad - 0.5 * logdet - 0.5 * z.size * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FittedGP:
    params: KernelParams  # beta0 holds the GLS estimate at the optimum
    points: PointSet
    z: np.ndarray
    l_factor: np.ndarray
    jitter: float
    loglik: float
    # cached solves
    alpha_solve: np.ndarray  # K^-1 (z - beta0*1)
    one_solve: np.ndarray  # K^-1 1
    s1: float  # 1^T K^-1 1


def _assemble_fitted(z, points, params):
    k = covariance_matrix(points, params)
    l_factor, jitter = chol_with_jitter(k)
    beta0, resid, alpha_solve, one_solve, s1 = _gls_parts(l_factor, z)
    quad = float(resid @ alpha_solve)
    logdet = 2.0 * float(np.sum(np.log(np.diag(l_factor))))
    loglik = -0.5 * quad - 0.5 * logdet - 0.5 * z.size * math.log(2.0 * math.pi)
    return FittedGP(
        params=replace(params, beta0=beta0),
        points=points,
        z=np.asarray(z, dtype=float).copy(),
        l_factor=l_factor,
        jitter=jitter,
        loglik=loglik,
        alpha_solve=alpha_solve,
        one_solve=one_solve,
        s1=s1,
    )


FIT_PARAM_ORDER = ("alpha", "lam", "r_s", "r_t", "delta")


def _clip(value, key):
    lo, hi = FIT_BOUNDS[key]
    return min(max(value, lo), hi)


def _to_unconstrained(p, free):
    """log for positives, logit for lam; only the free parameters."""
    u = []
    for name in free:
        value = getattr(p, "lam" if name == "lam" else name)
        if name == "lam":
            value = min(max(value, 1e-6), 1.0 - 1e-6)
            u.append(math.log(value / (1.0 - value)))
        else:
            u.append(math.log(max(value, FIT_BOUNDS[name][0])))
    return np.array(u)


def _from_unconstrained(u, free, fixed, adv):
    values = dict(fixed)
    for name, ui in zip(free, u):
        if name == "lam":
            values[name] = 1.0 / (1.0 + math.exp(-ui))
        else:
            values[name] = _clip(math.exp(ui), name)
    return KernelParams(
        alpha=values["alpha"],
        lam=values["lam"],
        r_s=values["r_s"],
        r_t=values["r_t"],
        delta=values["delta"],
        advection=adv,
    )


def default_start(adv):
    return KernelParams(alpha=1.0, lam=0.5, r_s=20.0, r_t=6.0, delta=0.1, advection=adv)


def heuristic_start(z, points, adv):
    """Data-driven start: variance from the residuals, spatial range from the
    site spread, temporal range one hour."""
    var = float(np.var(z))
    if not np.isfinite(var) or var <= 0:
        var = 1.0
    dx = points.x[:, None] - points.x[None, :]
    dy = points.y[:, None] - points.y[None, :]
    dist = np.hypot(dx, dy)
    nonzero = dist[dist > 0]
    r_s = float(np.median(nonzero)) if nonzero.size else 20.0
    return KernelParams(
        alpha=0.9 * var,
        lam=0.5,
        r_s=max(r_s, 1.0),
        r_t=6.0,
        delta=max(0.1 * var, 1e-6),
        advection=adv,
    )


def fit_gp(z, points, adv, init=None, maxfev=200, xatol=1e-3, fatol=1e-3, fixed=None):
    """Maximize the marginal likelihood over (alpha, lam, r_s, r_t, delta).

    The advection parameters are fixed (estimated from NWP, not optimized).
    Nelder-Mead direct search runs from three starts: a data-driven heuristic,
    the previous optimum when given (else a Lagrangian-leaning variant), and a
    fixed default; box constraints are enforced by log/logit transforms.  The
    best parameter vector seen across all evaluations is returned, so the
    result is never worse than any start.

    `fixed` maps parameter names to values held constant (e.g. the spatial
    baseline fixes lam=1 and a temporal range long enough that the temporal
    factor is exactly 1.0 in double precision).
    """
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(FIT_PARAM_ORDER)
    if unknown:
        raise ValidationError(f"unknown fixed parameters {sorted(unknown)}")
    free = tuple(name for name in FIT_PARAM_ORDER if name not in fixed)
    if not free:
        raise ValidationError("at least one kernel parameter must be free")
    z = np.asarray(z, dtype=float).ravel()
    if z.size == 0:
        raise ValidationError("cannot fit a GP to zero residuals")
    if z.size != len(points):
        raise ValidationError("residual vector and point set differ in length")

    # pairwise lags are fixed during the search; precompute once
    dx = points.x[:, None] - points.x[None, :]
    dy = points.y[:, None] - points.y[None, :]
    dw = points.t[:, None] - points.t[None, :]
    coincident = (points.site_code[:, None] == points.site_code[None, :]) & (
        points.t[:, None] == points.t[None, :]
    )
    n = z.size
    log2pi = n * math.log(2.0 * math.pi)

    best = {"nll": np.inf, "params": None}

    def objective(u):
        try:
            params = _from_unconstrained(u, free, fixed, adv)
            # kernel_values on (dx,dy,dw) lag pairs is already bitwise
            # symmetric (negation is exact), and the factorization reads one
            # triangle, so the symmetric-fill pass is skipped in this hot loop
            k = kernel_values(dx, dy, dw, params)
            k[coincident] += params.delta
            l_factor, _ = chol_with_jitter(k)
            _, resid, alpha_solve, _, _ = _gls_parts(l_factor, z)
            quad = float(resid @ alpha_solve)
            logdet = 2.0 * float(np.sum(np.log(np.diag(l_factor))))
            nll = 0.5 * (quad + logdet + log2pi)
        except (NumericalError, ValidationError, FloatingPointError, OverflowError):
            return 1e12
        if not np.isfinite(nll):
            return 1e12
        if nll < best["nll"]:
            best["nll"] = nll
            best["params"] = params
        return nll

    starts = [heuristic_start(z, points, adv)]
    if init is not None:
        starts.append(replace(init, advection=adv))
    else:
        starts.append(replace(default_start(adv), lam=0.1))
    starts.append(default_start(adv))

    diagnostics = []
    for start in starts:
        u0 = _to_unconstrained(start, free)
        try:
            result = minimize(
                objective,
                u0,
                method="Nelder-Mead",
                options={
                    "maxfev": maxfev,
                    "xatol": xatol,
                    "fatol": fatol,
                    "adaptive": False,
                },
            )
            diagnostics.append(f"start {start.alpha:.3g}/{start.lam:.2f}: f={result.fun:.6g}")
        except Exception as exc:  # noqa: BLE001 - diagnostics carried in FitError
            diagnostics.append(f"start failed: {exc}")

    if best["params"] is None:
        raise FitError("all optimizer starts failed", diagnostics)
    return _assemble_fitted(z, points, best["params"])


@dataclass(frozen=True)
class ForecastDistribution:
    """Per-point Gaussian predictive law, optionally with joint covariance."""

    points: PointSet
    horizons: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    def sd(self):
        return np.sqrt(np.maximum(self.variance, 0.0))


def distribution_to_csv(dist, site_ids, issue_time):
    """`site,issue_time,horizon_min,mean,sd` rows for one forecast origin."""
    lines = ["site,issue_time,horizon_min,mean,sd"]
    sds = dist.sd()
    for i, sid in enumerate(site_ids):
        lines.append(
            f"{sid},{issue_time},{int(dist.horizons[i]) * 10},"
            f"{dist.mean[i]:.6f},{sds[i]:.6f}"
        )
    return "\n".join(lines) + "\n"


def distribution_to_json(dist, site_ids, issue_time):
    """JSON form with the joint covariance when it was computed."""
    import json

    doc = {
        "issue_time": issue_time,
        "points": [
            {
                "site": sid,
                "horizon_min": int(dist.horizons[i]) * 10,
                "mean": float(dist.mean[i]),
                "variance": float(dist.variance[i]),
            }
            for i, sid in enumerate(site_ids)
        ],
    }
    if dist.covariance is not None:
        doc["covariance"] = dist.covariance.tolist()
    return json.dumps(doc, sort_keys=True)


#: forecasts at fewer steps ahead than this exclude the calibration term
SUBHOURLY_CUTOFF = 6


def predict(
    fitted,
    targets,
    mu_at_targets,
    mu_fallback=None,
    horizons=None,
    include_joint=False,
):
    """Universal-kriging predictive mean and variance at target points.

    mean  = mu + beta0 + k^T K^-1 (z - beta0*1)
    var   = (alpha + delta) - k^T K^-1 k + (1 - k^T K^-1 1)^2 / (1^T K^-1 1)

    When `mu_fallback` is given, targets with horizon < SUBHOURLY_CUTOFF use
    it in place of `mu_at_targets` (the calibration term is dropped for
    sub-hourly look-aheads).
    """
    mu = np.asarray(mu_at_targets, dtype=float).astype(float).copy()
    if horizons is None:
        horizons = np.zeros(len(targets), dtype=int)
    horizons = np.asarray(horizons)
    if mu_fallback is not None:
        mu[horizons < SUBHOURLY_CUTOFF] = mu_fallback
    params = fitted.params
    k_cross = cross_covariance(fitted.points, targets, params)  # n_train x n_targets
    mean = mu + params.beta0 + k_cross.T @ fitted.alpha_solve
    v = linalg.cho_solve((fitted.l_factor, True), k_cross)
    prior = params.alpha + params.delta
    b = 1.0 - k_cross.T @ fitted.one_solve
    variance = prior - np.sum(k_cross * v, axis=0) + b * b / fitted.s1
    variance = np.maximum(variance, 0.0)
    covariance = None
    if include_joint:
        k_tt = covariance_matrix(targets, params)
        covariance = k_tt - k_cross.T @ v + np.outer(b, b) / fitted.s1
        covariance = 0.5 * (covariance + covariance.T)
    return ForecastDistribution(
        points=targets,
        horizons=horizons,
        mean=mean,
        variance=variance,
        covariance=covariance,
    )


def _psd_factor(cov):
    """Lower factor L with L L^T = cov for any symmetric PSD matrix."""
    try:
        l_factor, _ = chol_with_jitter(cov)
        return l_factor
    except NumericalError:
        eigvals, eigvecs = np.linalg.eigh(cov)
        if np.min(eigvals) < -1e-8 * max(np.max(eigvals), 1.0):
            raise
        return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def sample_trajectories(dist, count, seed):
    """Exact joint Gaussian draws from a forecast distribution; seeded."""
    if dist.covariance is None:
        raise ValidationError("forecast distribution carries no joint covariance")
    cov = dist.covariance
    if np.allclose(cov, 0.0):
        return np.tile(dist.mean, (count, 1))
    l_factor = _psd_factor(cov)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((count, dist.mean.size))
    return dist.mean[None, :] + noise @ l_factor.T


def simulate_field(points, params, seed, dense_limit=DENSE_LIMIT):
    """One exact draw from N(beta0*1, K) over the point set; seeded."""
    n = len(points)
    if n > dense_limit:
        raise SizeLimitError(f"{n} points exceeds dense limit {dense_limit}")
    k = covariance_matrix(points, params)
    l_factor, _ = chol_with_jitter(k)
    rng = np.random.default_rng(seed)
    return params.beta0 + l_factor @ rng.standard_normal(n)


def simulate_space_time(sites, n_steps, params, seed, block=600, overlap=64,
                        dense_limit=DENSE_LIMIT):
    """Draw a zero-start space-time field over `sites` x `n_steps`.

    Long series are built block by block, each block drawn conditionally on
    the trailing `overlap` steps of the previous one; dependence beyond the
    overlap is truncated, so pick overlap well past the temporal range.
    Returns an (n_sites, n_steps) array including the process mean.
    """
    n_sites = len(sites)
    max_block = max(1, dense_limit // n_sites - overlap)
    block = min(block, max_block)
    rng = np.random.default_rng(seed)

    xs = np.array([s.x for s in sites])
    ys = np.array([s.y for s in sites])

    def point_set(t_lo, t_hi):
        steps = np.arange(t_lo, t_hi)
        t = np.repeat(steps, n_sites).astype(float)
        codes = np.tile(np.arange(n_sites, dtype=np.int64), steps.size)
        return PointSet(
            x=xs[codes], y=ys[codes], t=t, site_code=codes,
            site_ids=tuple(s.id for s in sites),
        )

    out = np.empty((n_sites, n_steps))
    t_done = 0
    prev_tail = None  # (PointSet, zero-mean values)
    while t_done < n_steps:
        t_hi = min(t_done + block, n_steps)
        pts = point_set(t_done, t_hi)
        k_bb = covariance_matrix(pts, params)
        if prev_tail is None:
            l_factor, _ = chol_with_jitter(k_bb)
            draw = l_factor @ rng.standard_normal(len(pts))
        else:
            tail_pts, tail_values = prev_tail
            k_pp = covariance_matrix(tail_pts, params)
            k_pb = cross_covariance(tail_pts, pts, params)
            lp, _ = chol_with_jitter(k_pp)
            solve = linalg.cho_solve((lp, True), k_pb)
            mean = solve.T @ tail_values
            cond = k_bb - k_pb.T @ solve
            cond = 0.5 * (cond + cond.T)
            l_factor = _psd_factor(cond)
            draw = mean + l_factor @ rng.standard_normal(len(pts))
        values = draw.reshape(t_hi - t_done, n_sites).T
        out[:, t_done:t_hi] = values
        tail_lo = max(0, t_hi - overlap)
        tail_pts = point_set(tail_lo, t_hi)
        tail_values = out[:, tail_lo:t_hi].T.reshape(-1)
        prev_tail = (tail_pts, tail_values)
        t_done = t_hi
    return params.beta0 + out

"""Space-time covariance kernels.

Implements the separable squared-exponential kernel, the closed-form
advection-diffusion kernel obtained by averaging a squared-exponential over a
Gaussian flow vector, their convex combination, and the NWP-driven estimation
of the flow parameters.

Gram-matrix assembly is the hot loop of hyperparameter fitting (millions of
kernel evaluations per likelihood call), so the array kernels have a numba
@njit implementation with a pure-numpy fallback.  Set STWIND_NUMBA=0 to force
the numpy path; the numba path is used by default when numba imports.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, ValidationError

log = logging.getLogger(__name__)

#: km per 10-min lag unit for a 1 m/s flow (600 s / 1000 m).
MS_TO_KM_PER_LAG = 0.6


def _kernel_values_numpy(dx, dy, w, alpha, lam, rs, rt, mx, my, s11, s12, s22):
    g2 = dx * dx + dy * dy
    w2 = w * w
    sep = np.exp(-g2 / (rs * rs) - w2 / (rt * rt))
    f11 = 1.0 + 2.0 * s11 * w2
    f22 = 1.0 + 2.0 * s22 * w2
    f12 = 2.0 * s12 * w2
    det = f11 * f22 - f12 * f12
    rx = dx - mx * w
    ry = dy - my * w
    q = (f22 * rx * rx - 2.0 * f12 * rx * ry + f11 * ry * ry) / det
    adv = np.exp(-q) / np.sqrt(det)
    return alpha * (lam * sep + (1.0 - lam) * adv)


def _kernel_values_loop(dx, dy, w, alpha, lam, rs, rt, mx, my, s11, s12, s22, out):
    for i in range(dx.shape[0]):
        g2 = dx[i] * dx[i] + dy[i] * dy[i]
        w2 = w[i] * w[i]
        sep = math.exp(-g2 / (rs * rs) - w2 / (rt * rt))
        f11 = 1.0 + 2.0 * s11 * w2
        f22 = 1.0 + 2.0 * s22 * w2
        f12 = 2.0 * s12 * w2
        det = f11 * f22 - f12 * f12
        rx = dx[i] - mx * w[i]
        ry = dy[i] - my * w[i]
        q = (f22 * rx * rx - 2.0 * f12 * rx * ry + f11 * ry * ry) / det
        adv = math.exp(-q) / math.sqrt(det)
        out[i] = alpha * (lam * sep + (1.0 - lam) * adv)


def _init_backend():
    if os.environ.get("STWIND_NUMBA", "1") == "0":
        return None, "numpy (STWIND_NUMBA=0)"
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a hard dependency
        log.warning("numba unavailable, falling back to the numpy kernel path")
        return None, "numpy (numba missing)"
    return njit(cache=True)(_kernel_values_loop), "numba"


_KERNEL_JIT, KERNEL_BACKEND = _init_backend()


def kernel_values(dx, dy, w, params):
    """Nugget-free combined kernel over arrays of signed lags.

    dx, dy are spatial lags in km, w the signed temporal lag; any common
    shape is accepted.
    """
    dx = np.ascontiguousarray(dx, dtype=float)
    dy = np.ascontiguousarray(dy, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    adv = params.advection
    args = (
        params.alpha,
        params.lam,
        params.r_s,
        params.r_t,
        adv.mean[0],
        adv.mean[1],
        adv.cov[0, 0],
        adv.cov[0, 1],
        adv.cov[1, 1],
    )
    if _KERNEL_JIT is None:
        return _kernel_values_numpy(dx, dy, w, *args)
    out = np.empty(dx.size)
    _KERNEL_JIT(dx.ravel(), dy.ravel(), w.ravel(), *args, out)
    return out.reshape(dx.shape)


@dataclass(frozen=True)
class AdvectionParams:
    """Gaussian flow vector: mean (km/lag) and covariance ((km/lag)^2)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValidationError("advection parameters must be finite")
        if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValidationError("advection covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        eigvals, eigvecs = np.linalg.eigh(cov)
        if np.any(eigvals < 0):
            # negative round-off eigenvalues are zeroed before use
            eigvals = np.clip(eigvals, 0.0, None)
            cov = (eigvecs * eigvals) @ eigvecs.T
            cov = 0.5 * (cov + cov.T)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the combined covariance."""

    alpha: float  # marginal variance, > 0
    lam: float  # separable weight in [0, 1]
    r_s: float  # spatial range, km, > 0
    r_t: float  # temporal range, lag units, > 0
    delta: float  # nugget variance, >= 0
    beta0: float = 0.0  # process mean, m/s
    advection: AdvectionParams = field(
        default_factory=lambda: AdvectionParams(np.zeros(2), np.zeros((2, 2)))
    )

    def __post_init__(self):
        checks = (
            (self.alpha > 0, "alpha must be > 0"),
            (0.0 <= self.lam <= 1.0, "lam must be in [0, 1]"),
            (self.r_s > 0, "r_s must be > 0"),
            (self.r_t > 0, "r_t must be > 0"),
            (self.delta >= 0, "delta must be >= 0"),
        )
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)
        values = (self.alpha, self.lam, self.r_s, self.r_t, self.delta, self.beta0)
        if not all(np.isfinite(v) for v in values):
            raise ValidationError("kernel parameters must be finite")


def estimate_advection(u, v, scale=MS_TO_KM_PER_LAG):
    """Flow parameters from NWP wind components over a window.

    Mean and sample covariance of (u, v) in m/s, scaled into km per lag.
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.size != v.size:
        raise ValidationError("u and v must have equal length")
    if u.size == 0:
        raise EstimationError("empty advection window")
    if u.size < 10:
        log.warning("advection window has only %d samples", u.size)
    mean = np.array([u.mean(), v.mean()]) * scale
    if u.size < 2:
        cov = np.zeros((2, 2))
    else:
        cov = np.cov(np.vstack([u, v]), ddof=1) * scale * scale
    return AdvectionParams(mean=mean, cov=cov)


def lagrangian_kernel(gamma, w, adv):
    """Closed-form advected correlation: |F|^{-1/2} exp(-r^T F^{-1} r).

    r = gamma - mean*w and F = I + 2*cov*w^2; F is always invertible because
    its eigenvalues are >= 1.
    """
    gamma = np.asarray(gamma, dtype=float).reshape(2)
    f = np.eye(2) + 2.0 * adv.cov * w * w
    r = gamma - adv.mean * w
    det = f[0, 0] * f[1, 1] - f[0, 1] * f[1, 0]
    q = (f[1, 1] * r[0] * r[0] - 2.0 * f[0, 1] * r[0] * r[1] + f[0, 0] * r[1] * r[1]) / det
    return math.exp(-q) / math.sqrt(det)


def separable_kernel(gamma, w, r_s, r_t):
    """Product of spatial and temporal squared-exponential correlations."""
    if r_s <= 0 or r_t <= 0:
        raise ValidationError("range parameters must be positive")
    gamma = np.asarray(gamma, dtype=float).reshape(2)
    g2 = float(gamma @ gamma)
    return math.exp(-g2 / (r_s * r_s)) * math.exp(-(w * w) / (r_t * r_t))


def combined_kernel(gamma, w, params):
    """Convex combination of separable and advected correlations, plus nugget
    at the exact space-time origin."""
    gamma = np.asarray(gamma, dtype=float).reshape(2)
    value = params.alpha * (
        params.lam * separable_kernel(gamma, w, params.r_s, params.r_t)
        + (1.0 - params.lam) * lagrangian_kernel(gamma, w, params.advection)
    )
    if gamma[0] == 0.0 and gamma[1] == 0.0 and w == 0:
        value += params.delta
    return value


@dataclass(frozen=True)
class PointSet:
    """Space-time points: projected coordinates (km), integer grid index, and
    a site code so nugget placement can use exact identity."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    site_code: np.ndarray
    site_ids: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("x", "y", "t"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        codes = np.ascontiguousarray(self.site_code, dtype=np.int64)
        codes.flags.writeable = False
        object.__setattr__(self, "site_code", codes)
        n = self.x.size
        if not (self.y.size == self.t.size == self.site_code.size == n):
            raise ValidationError("point arrays must share one length")

    def __len__(self):
        return self.x.size

    @classmethod
    def from_rows(cls, sites, rows):
        """Build from (site_id, time_index) rows against a Site list."""
        order = {s.id: i for i, s in enumerate(sites)}
        xs = np.array([s.x for s in sites])
        ys = np.array([s.y for s in sites])
        codes = np.array([order[sid] for sid, _ in rows], dtype=np.int64)
        t = np.array([ti for _, ti in rows], dtype=float)
        return cls(
            x=xs[codes],
            y=ys[codes],
            t=t,
            site_code=codes,
            site_ids=tuple(s.id for s in sites),
        )


def _coincidence_mask(a, b):
    return (a.site_code[:, None] == b.site_code[None, :]) & (a.t[:, None] == b.t[None, :])


def covariance_matrix(points, params):
    """Gram matrix over one point set; symmetric by construction (upper
    triangle mirrored), nugget on exact (site, time) coincidence."""
    dx = points.x[:, None] - points.x[None, :]
    dy = points.y[:, None] - points.y[None, :]
    dw = points.t[:, None] - points.t[None, :]
    k = kernel_values(dx, dy, dw, params)
    k = np.triu(k) + np.triu(k, 1).T
    if params.delta != 0.0:
        k[_coincidence_mask(points, points)] += params.delta
    return k


def cross_covariance(points_a, points_b, params):
    """Covariances between two point sets; nugget only on exact coincidence."""
    dx = points_a.x[:, None] - points_b.x[None, :]
    dy = points_a.y[:, None] - points_b.y[None, :]
    dw = points_a.t[:, None] - points_b.t[None, :]
    k = kernel_values(dx, dy, dw, params)
    if params.delta != 0.0:
        k[_coincidence_mask(points_a, points_b)] += params.delta
    return k

"""Timing comparison of the numba and pure-numpy kernel paths.

The Gram-matrix evaluation dominates hyperparameter fitting (one per
likelihood call), so this is the number that decides backtest wall time.

Usage:
    python benchmarks/bench_kernels.py [n_points]

The numpy path is what you get with STWIND_NUMBA=0; here both are called
directly so one process can time the two back to back.
"""

import sys
import time

import numpy as np

from stwind.kernels import (
    AdvectionParams,
    KernelParams,
    PointSet,
    _kernel_values_numpy,
    covariance_matrix,
    kernel_values,
)
from stwind import gp


def time_it(fn, repeats=5):
    fn()  # warm-up (and JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main(n=1440):
    rng = np.random.default_rng(0)
    adv = AdvectionParams(np.array([3.6, 0.5]), 0.3 * np.eye(2))
    params = KernelParams(alpha=1.0, lam=0.3, r_s=20.0, r_t=6.0, delta=0.01, advection=adv)

    xy = rng.uniform(0.0, 80.0, size=(8, 2))
    codes = rng.integers(0, 8, size=n).astype(np.int64)
    t = np.arange(n, dtype=float) // 8
    pts = PointSet(x=xy[codes, 0], y=xy[codes, 1], t=t, site_code=codes)
    dx = pts.x[:, None] - pts.x[None, :]
    dy = pts.y[:, None] - pts.y[None, :]
    dw = pts.t[:, None] - pts.t[None, :]

    args = (
        params.alpha, params.lam, params.r_s, params.r_t,
        adv.mean[0], adv.mean[1], adv.cov[0, 0], adv.cov[0, 1], adv.cov[1, 1],
    )

    t_jit = time_it(lambda: kernel_values(dx, dy, dw, params))
    t_np = time_it(lambda: _kernel_values_numpy(dx, dy, dw, *args))
    t_gram = time_it(lambda: covariance_matrix(pts, params))

    z = gp.simulate_field(pts, params, seed=1) if n <= gp.DENSE_LIMIT else None
    t_ll = (
        time_it(lambda: gp.log_marginal_likelihood(z, pts, params), repeats=3)
        if z is not None
        else float("nan")
    )

    print(f"n = {n} points ({n * n / 1e6:.2f}M kernel evaluations per Gram matrix)")
    print(f"  kernel values, numba loop : {t_jit * 1e3:9.2f} ms")
    print(f"  kernel values, numpy      : {t_np * 1e3:9.2f} ms   ({t_np / t_jit:4.1f}x numba)")
    print(f"  full Gram matrix          : {t_gram * 1e3:9.2f} ms")
    print(f"  one likelihood evaluation : {t_ll * 1e3:9.2f} ms")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1440)

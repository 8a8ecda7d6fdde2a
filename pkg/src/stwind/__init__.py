"""stwind: physics-guided spatio-temporal wind forecasting.

Calibrates coarse NWP series against local high-frequency observations,
models residuals with an advection-aware space-time Gaussian process, and
evaluates probabilistic short-term forecasts in a rolling backtest.
"""

__version__ = "0.1.0"

from .kernels import KERNEL_BACKEND  # noqa: F401

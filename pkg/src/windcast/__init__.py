"""windcast: seamless short- to mid-term probabilistic wind power forecasting.

Quantile gradient-boosted trees map weather to power; ensemble members are
kernel-dressed and combined through a beta-transformed linear opinion pool,
with reference methods (raw-ensemble quantiles, averaged member quantiles,
deterministic-NWP per-horizon models, EMOS-Gamma) and a verification suite
(CRPS, skill with block-bootstrap significance, reliability, uncertainty
decomposition) alongside.
"""

from windcast.core import (
    ForecastIndex,
    PowerRecord,
    QuantileGrid,
    QuantileSet,
    SplitResult,
    UncertaintyProfile,
    default_horizon_grid,
    filter_curtailed,
    kernel_quantile_grid,
    normalize_power,
    split_estimation_test,
    standard_quantile_grid,
)

__version__ = "0.1.0"

__all__ = [
    "ForecastIndex",
    "PowerRecord",
    "QuantileGrid",
    "QuantileSet",
    "SplitResult",
    "UncertaintyProfile",
    "default_horizon_grid",
    "filter_curtailed",
    "kernel_quantile_grid",
    "normalize_power",
    "split_estimation_test",
    "standard_quantile_grid",
    "__version__",
]

"""Chance-constrained optimization via a kernel-smoothed sample quantile.

The probabilistic constraint ``P(C(x, xi) <= 0) >= 1 - alpha`` is replaced
by ``Q_eps(C(x, xi_1), ..., C(x, xi_N)) <= 0`` where ``Q_eps`` is a smooth
surrogate of the empirical ``(1 - alpha)``-quantile.  The resulting smooth
nonlinear program is solved with an l1-penalty trust-region SQP method.
"""

from ccquantile.kernel import QuarticKernel, SmoothingKernel
from ccquantile.quantile import (
    QuantileConfig,
    QuantileEval,
    empirical_quantile,
    quantile_gradient,
    quantile_hessian,
    solve_quantile,
)

__version__ = "0.1.0"

__all__ = [
    "QuarticKernel",
    "SmoothingKernel",
    "QuantileConfig",
    "QuantileEval",
    "empirical_quantile",
    "quantile_gradient",
    "quantile_hessian",
    "solve_quantile",
    "__version__",
]

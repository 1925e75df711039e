"""Built-in test instances.

* ``nonconvex1d`` -- two-variable problem with a quartic, non-convex
  stochastic constraint and two local solutions.
* ``reinsurance`` -- Value-at-Risk minimization of a portfolio of 25
  reinsurance contracts subject to a premium floor.
* ``knapsack`` -- continuous multi-dimensional knapsack with random item
  weights and a joint chance constraint over 10 capacity rows.
* ``quadratic_demo`` / ``linear_demo`` -- one- and two-dimensional
  constraints with closed-form quantiles, used by the validators.

Random instance data (prices, mean weights, loss parameters) is drawn from
the ``INSTANCE`` stream of :mod:`ccquantile.rng`, so an instance is fully
determined by its seed.
"""

from dataclasses import dataclass, field

import numpy as np

from ccquantile.exceptions import InvalidArgumentError
from ccquantile.model import ProblemSpec
from ccquantile.rng import instance_streams

DEFAULT_INSTANCE_SEED = 20240601


@dataclass
class Instance:
    problem: ProblemSpec
    generator_id: str
    params: dict
    alpha: float
    x0: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def name(self):
        return self.problem.name


def _box_rows(n_box, n_total, offset=0):
    """Rows ``-x_j <= 0`` then ``x_j - 1 <= 0`` for ``j < n_box``."""
    J = np.zeros((2 * n_box, n_total))
    idx = np.arange(n_box)
    J[idx, offset + idx] = -1.0
    J[n_box + idx, offset + idx] = 1.0
    return J


# ---------------------------------------------------------------------------


def _poly(x):
    return 0.25 * x**4 - x**3 / 3.0 - x**2 + 0.2 * x - 19.5


def _poly_d1(x):
    return x**3 - x**2 - 2.0 * x + 0.2


def _poly_d2(x):
    return 3.0 * x**2 - 2.0 * x - 2.0


def builtin_nonconvex1d(alpha=0.05, var1=3.0, var2=144.0):
    """Decision ``(x, y)``; minimize ``y`` s.t. ``P(poly(x) + xi1 x + xi2 <= y) >= 1 - alpha``.

    ``xi1 ~ N(0, var1)`` and ``xi2 ~ N(0, var2)``, independent.
    """

    def c(v, xi):
        x, y = v
        return (_poly(x) + xi[:, 0] * x + xi[:, 1] - y)[:, None]

    def jac_c(v, xi):
        x = v[0]
        J = np.empty((xi.shape[0], 1, 2))
        J[:, 0, 0] = _poly_d1(x) + xi[:, 0]
        J[:, 0, 1] = -1.0
        return J

    def hess_c(v, xi, weights):
        H = np.zeros((2, 2))
        H[0, 0] = _poly_d2(v[0]) * float(np.sum(weights))
        return H

    ps = ProblemSpec(
        n=2,
        p=0,
        m=1,
        s=2,
        f=lambda v: float(v[1]),
        grad_f=lambda v: np.array([0.0, 1.0]),
        hess_f=lambda v: np.zeros((2, 2)),
        g=lambda v: np.zeros(0),
        jac_g=lambda v: np.zeros((0, 2)),
        c=c,
        jac_c=jac_c,
        hess_c=hess_c,
        name="nonconvex1d",
    )
    params = {"s": 2, "mean": [0.0, 0.0], "var": [float(var1), float(var2)]}
    return Instance(ps, "normal", params, alpha, np.array([0.0, 2.5]), info={"var": (var1, var2)})


def nonconvex1d_true_objective(x, z=1.6448536269514722, var1=3.0, var2=144.0):
    """Exact ``(1 - alpha)``-quantile of ``poly(x) + xi1 x + xi2`` for the
    normal model; ``z`` is the standard-normal quantile."""
    x = np.asarray(x, dtype=float)
    return _poly(x) + z * np.sqrt(var1 * x**2 + var2)


# ---------------------------------------------------------------------------


def builtin_reinsurance(n=25, seed=DEFAULT_INSTANCE_SEED, alpha=0.05, premium_fraction=0.1):
    """Minimize the portfolio VaR ``z`` over contract shares ``x in [0, 1]^n``.

    Losses ``L_j = B_j * LogNormal(mu_j, sigma_j)`` (thousands) with
    ``B_j ~ Bernoulli(q_j)``; premiums ``c_j`` carry a loading over the
    expected loss.  Constraints: premium floor ``c^T x >= c*`` with
    ``c* = premium_fraction * sum(c)``, box bounds, and the chance
    constraint ``P(L^T x - z <= 0) >= 1 - alpha``.
    """
    if n < 1:
        raise InvalidArgumentError("reinsurance needs n >= 1")
    rs = instance_streams(seed, 1)
    u = rs.uniform(4 * n)[0].reshape(4, n)
    q = 0.05 + 0.10 * u[0]
    mu = 6.0 + 1.5 * u[1]
    sigma = 0.8 + 0.8 * u[2]
    loading = 0.2 + 0.4 * u[3]
    scale = 1e-3
    premium = (1.0 + loading) * q * np.exp(mu + 0.5 * sigma**2) * scale
    c_star = premium_fraction * float(np.sum(premium))
    nv = n + 1

    Jg = np.zeros((1 + 2 * n, nv))
    Jg[0, :n] = -premium
    Jg[1:] = _box_rows(n, nv)
    gconst = np.concatenate([[c_star], np.zeros(n), -np.ones(n)])

    grad_f = np.zeros(nv)
    grad_f[n] = 1.0

    def c(v, xi):
        return (xi @ v[:n] - v[n])[:, None]

    def jac_c(v, xi):
        J = np.empty((xi.shape[0], 1, nv))
        J[:, 0, :n] = xi
        J[:, 0, n] = -1.0
        return J

    ps = ProblemSpec(
        n=nv,
        p=1 + 2 * n,
        m=1,
        s=n,
        f=lambda v: float(v[n]),
        grad_f=lambda v: grad_f.copy(),
        hess_f=lambda v: np.zeros((nv, nv)),
        g=lambda v: Jg @ v + gconst,
        jac_g=lambda v: Jg.copy(),
        c=c,
        jac_c=jac_c,
        name="reinsurance",
    )
    params = {"q": q, "mu": mu, "sigma": sigma, "scale": scale}
    x0 = np.concatenate([np.full(n, 0.2), [0.0]])
    info = {"premium": premium, "c_star": c_star, "loading": loading, "seed": seed}
    return Instance(ps, "reinsurance", params, alpha, x0, info=info)


# ---------------------------------------------------------------------------


def builtin_knapsack(n=20, m=10, seed=DEFAULT_INSTANCE_SEED, alpha=0.05, q=0.9, rel_std=0.1, unit=100.0):
    """Continuous multi-dimensional knapsack with random weights.

    ``W_ij = B_j * Normal(mu_ij, (rel_std * mu_ij)^2)`` with one availability
    draw ``B_j ~ Bernoulli(q)`` per item and scenario.  Mean weights
    ``mu_ij`` are integers in [1, 100], profits ``p_j`` integers in
    [10, 100] and capacities ``w_i = 0.5 * sum_j mu_ij``.

    Profits and weights are expressed in multiples of ``unit``: the
    objective is ``-p^T x / unit`` and the rows are ``(W_i x - w_i) / unit``.
    Rescaling changes neither the feasible set nor the minimizers, but keeps
    all multipliers of order one, well below the default penalty.
    """
    rs = instance_streams(seed, 2)
    u = rs.uniform(m * n + n)[0]
    mu = np.floor(1.0 + 100.0 * u[: m * n]).reshape(m, n)
    profit = np.floor(10.0 + 91.0 * u[m * n :])
    cap = 0.5 * mu.sum(axis=1)
    obj = -profit / unit

    Jg = _box_rows(n, n)
    gconst = np.concatenate([np.zeros(n), -np.ones(n)])

    def c(x, xi):
        W = xi.reshape(-1, m, n)
        return (W @ x - cap) / unit

    def jac_c(x, xi):
        return xi.reshape(-1, m, n) / unit

    ps = ProblemSpec(
        n=n,
        p=2 * n,
        m=m,
        s=m * n,
        f=lambda x: float(obj @ x),
        grad_f=lambda x: obj.copy(),
        hess_f=lambda x: np.zeros((n, n)),
        g=lambda x: Jg @ x + gconst,
        jac_g=lambda x: Jg.copy(),
        c=c,
        jac_c=jac_c,
        name="knapsack",
    )
    params = {"mu": mu, "q": q, "rel_std": rel_std}
    info = {"profit": profit, "capacity": cap, "mu": mu, "seed": seed, "unit": unit}
    return Instance(ps, "knapsack", params, alpha, np.zeros(n), info=info)


# ---------------------------------------------------------------------------


def quadratic_demo(alpha=0.05):
    """Scalar ``x``; constraint ``x^2 - 2 + xi <= 0`` with ``xi ~ N(0, 1)``.

    Objective ``-x`` (not used by the flatness profile but keeps the
    instance solvable).
    """
    ps = ProblemSpec(
        n=1,
        p=0,
        m=1,
        s=1,
        f=lambda x: float(-x[0]),
        grad_f=lambda x: np.array([-1.0]),
        hess_f=lambda x: np.zeros((1, 1)),
        g=lambda x: np.zeros(0),
        jac_g=lambda x: np.zeros((0, 1)),
        c=lambda x, xi: (x[0] ** 2 - 2.0 + xi[:, 0])[:, None],
        jac_c=lambda x, xi: np.full((xi.shape[0], 1, 1), 2.0 * x[0]),
        hess_c=lambda x, xi, w: np.array([[2.0 * float(np.sum(w))]]),
        name="quadratic_demo",
    )
    return Instance(ps, "normal", {"s": 1, "mean": 0.0, "var": 1.0}, alpha, np.zeros(1))


def linear_demo(alpha=0.05):
    """``x`` in R^2; constraint ``xi^T x - 1 <= 0`` with ``xi ~ N(0, I_2)``.

    The true ``(1 - alpha)``-quantile is ``z_{1-alpha} * ||x|| - 1``.
    Objective ``-(x_1 + x_2)``.
    """
    ps = ProblemSpec(
        n=2,
        p=0,
        m=1,
        s=2,
        f=lambda x: float(-x[0] - x[1]),
        grad_f=lambda x: np.array([-1.0, -1.0]),
        hess_f=lambda x: np.zeros((2, 2)),
        g=lambda x: np.zeros(0),
        jac_g=lambda x: np.zeros((0, 2)),
        c=lambda x, xi: (xi @ x - 1.0)[:, None],
        jac_c=lambda x, xi: xi[:, None, :].copy(),
        name="linear_demo",
    )
    return Instance(ps, "normal", {"s": 2, "mean": 0.0, "var": 1.0}, alpha, np.zeros(2))


BUILTINS = {
    "nonconvex1d": builtin_nonconvex1d,
    "reinsurance": builtin_reinsurance,
    "knapsack": builtin_knapsack,
    "quadratic_demo": quadratic_demo,
    "linear_demo": linear_demo,
}


def get_instance(name, **kwargs):
    if name not in BUILTINS:
        raise InvalidArgumentError(f"unknown problem {name!r}; known: {sorted(BUILTINS)}")
    return BUILTINS[name](**kwargs)

"""Bisection over the smoothing parameter epsilon.

A larger ``epsilon`` makes the smoothed quantile more conservative, so the
out-of-sample feasibility probability ``p(epsilon)`` tends to increase with
``epsilon``.  The tuner searches for an ``epsilon`` whose solution is
feasible with probability close to ``1 - alpha`` on a separate validation
sample:

* start from ``epsilon_0 = mult * std(C(x_robust, xi_i))`` where
  ``x_robust`` solves the scenario-wise robust problem;
* if ``p > 1 - alpha`` the upper bracket moves down, otherwise the lower
  bracket moves up (doubling while no upper bracket exists);
* stop when ``|p - (1 - alpha)| <= prob_tol`` or after ``max_bisections``
  bisections, and return the lowest-objective probe among those with
  ``p >= 1 - alpha - prob_tol``.

Each probe is warm-started from the previous probe's solution and
multipliers.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ccquantile.exceptions import InvalidArgumentError
from ccquantile.kernel import QuarticKernel
from ccquantile.model import ProblemSpec, eval_scenario_values, sample
from ccquantile.quantile import QuantileConfig
from ccquantile.rng import VALIDATION
from ccquantile.sl1qp import TrParams, solve

OK = "ok"
NO_FEASIBLE_PROBE = "no_feasible_probe"

TUNER_FIELDS = ("probe", "epsilon", "p_oos", "objective", "iters", "wall_ms", "status", "eps_lb", "eps_ub")


@dataclass(frozen=True)
class TunerConfig:
    prob_tol: float = 1e-4
    max_bisections: int = 10
    oos_sample_size: int = 100_000
    epsilon_0_multiplier: float = 2.0

    def __post_init__(self):
        if not self.prob_tol > 0:
            raise InvalidArgumentError("prob_tol must be positive")
        if self.max_bisections < 1:
            raise InvalidArgumentError("max_bisections must be at least 1")
        if self.oos_sample_size < 1000:
            raise InvalidArgumentError("oos_sample_size must be at least 1000")
        if not self.epsilon_0_multiplier > 0:
            raise InvalidArgumentError("epsilon_0_multiplier must be positive")


@dataclass
class Probe:
    index: int
    epsilon: float
    p: float
    objective: float
    payload: object = None
    wall_ms: float = 0.0
    eps_lb: float = 0.0
    eps_ub: float = math.inf


@dataclass
class BisectionResult:
    best: Probe
    probes: list
    status: str


@dataclass
class TuneResult:
    epsilon: float
    report: object
    probes: list
    status: str
    epsilon0: float
    x_robust: np.ndarray
    robust_converged: bool
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def p_oos(self):
        return self.report.oos_probability

    def trace_rows(self):
        rows = []
        for pr in self.probes:
            rep = pr.payload
            rows.append({
                "probe": pr.index,
                "epsilon": pr.epsilon,
                "p_oos": pr.p,
                "objective": pr.objective,
                "iters": getattr(rep, "iterations", ""),
                "wall_ms": pr.wall_ms,
                "status": getattr(rep, "status", ""),
                "eps_lb": pr.eps_lb,
                "eps_ub": pr.eps_ub,
            })
        return rows

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=TUNER_FIELDS)
            wr.writeheader()
            for row in self.trace_rows():
                wr.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})


def oos_probability(ps, x, S_val):
    """Fraction of validation scenarios with ``max_j c_j(x, xi) <= 0``."""
    values = eval_scenario_values(ps, x, S_val).values
    return float(np.mean(values <= 0.0))


def oos_probability_sampled(ps, generator_id, params, x, size, seed, stream=VALIDATION, chunk=50_000):
    """Like :func:`oos_probability` but draws the sample in chunks on the fly,
    so very large validation sizes fit in memory."""
    hits = 0
    for start in range(0, int(size), chunk):
        S = sample(generator_id, params, min(chunk, size - start), seed, stream=stream, start=start)
        hits += int(np.count_nonzero(eval_scenario_values(ps, x, S).values <= 0.0))
    return hits / float(size)


def robust_problem(ps, S):
    """Deterministic problem with every scenario row as an ordinary g row."""
    xi = S.data
    N, m, n, p = S.N, ps.m, ps.n, ps.p

    def g(x):
        return np.concatenate([ps.eval_g(x), np.asarray(ps.c(x, xi), dtype=float).reshape(-1)])

    def jac_g(x):
        return np.vstack([ps.eval_jac_g(x), np.asarray(ps.jac_c(x, xi), dtype=float).reshape(N * m, n)])

    hess_g = None
    if ps.hess_g is not None or ps.hess_c is not None:
        def hess_g(x, nu):
            return ps.eval_hess_g(x, nu[:p]) + ps.eval_hess_c(x, xi, nu[p:].reshape(N, m))

    return ProblemSpec(
        n=n, p=p + N * m, m=0, s=0,
        f=ps.f, grad_f=ps.grad_f, hess_f=ps.hess_f,
        g=g, jac_g=jac_g, hess_g=hess_g,
        c=lambda x, xi_: np.zeros((np.atleast_2d(xi_).shape[0], 0)),
        jac_c=lambda x, xi_: np.zeros((np.atleast_2d(xi_).shape[0], 0, n)),
        name=f"{ps.name}_robust",
    )


def robust_solve(ps, S, x0, tr=TrParams()):
    """Solve ``min f`` s.t. ``g <= 0`` and ``c(x, xi_i) <= 0`` for every scenario.

    Scenario rows become penalized deterministic rows of the same Sl1QP loop.
    Returns the :class:`SolveReport`.
    """
    if ps.m == 0:
        return solve(ps, None, x0, tr=tr)
    return solve(robust_problem(ps, S), None, x0, tr=tr)


def initial_epsilon(ps, S, x, mult=2.0):
    """``mult`` times the sample standard deviation of ``C(x, xi_i)``.

    A zero (or undefined) spread falls back to ``max(1e-6, 1e-3 max|C|)``.
    """
    values = eval_scenario_values(ps, x, S).values
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    if not std > 0.0:
        return mult * max(1e-6, 1e-3 * float(np.max(np.abs(values))))
    return mult * std


def bisect_epsilon(eps0, evaluate, target, cfg):
    """Generic bracketing search.

    ``evaluate(eps) -> (p, objective, payload)``.  ``p`` is assumed to grow
    with ``eps``.  Performs one initial probe plus at most
    ``cfg.max_bisections`` further probes.
    """
    if not (eps0 > 0 and math.isfinite(eps0)):
        raise InvalidArgumentError("initial epsilon must be positive and finite")
    lb, ub = 0.0, math.inf
    eps = float(eps0)
    probes = []
    for index in range(cfg.max_bisections + 1):
        t0 = time.perf_counter()
        p, obj, payload = evaluate(eps)
        probes.append(Probe(index, eps, float(p), float(obj), payload, 1e3 * (time.perf_counter() - t0), lb, ub))
        if abs(p - target) <= cfg.prob_tol or index == cfg.max_bisections:
            break
        if p > target:
            ub = eps
            eps = 0.5 * (eps + lb)
        else:
            lb = eps
            eps = 2.0 * eps if math.isinf(ub) else 0.5 * (ub + eps)
    feasible = [pr for pr in probes if pr.p >= target - cfg.prob_tol]
    if feasible:
        best = min(feasible, key=lambda pr: (pr.objective, pr.p, pr.index))
        return BisectionResult(best, probes, OK)
    best = max(probes, key=lambda pr: (pr.epsilon, -pr.index))
    return BisectionResult(best, probes, NO_FEASIBLE_PROBE)


def tune(ps, S, alpha, S_val, cfg=TunerConfig(), tr=TrParams(), x0=None, kernel_cls=QuarticKernel,
         quantile_cfg=None, log=None):
    """Tune epsilon for the problem ``ps`` on training scenarios ``S``.

    ``S_val`` is the validation sample used to estimate out-of-sample
    feasibility.  Returns a :class:`TuneResult` whose report carries the
    validation probability of the selected probe.
    """
    t0 = time.perf_counter()
    qcfg = quantile_cfg or QuantileConfig(alpha)
    x0 = np.asarray(x0, dtype=float)
    rob = robust_solve(ps, S, x0, tr)
    x_start = rob.x if rob.converged else x0
    eps0 = initial_epsilon(ps, S, x_start, cfg.epsilon_0_multiplier)
    state = {"x": x_start, "mult": None}

    def evaluate(eps):
        rep = solve(ps, S, state["x"], qcfg, kernel_cls(eps), tr, warm=state["mult"])
        p = oos_probability(ps, rep.x, S_val)
        rep.oos_probability = p
        state["x"], state["mult"] = rep.x, rep.multipliers
        if log is not None:
            log(eps, p, rep)
        return p, rep.f, rep

    res = bisect_epsilon(eps0, evaluate, 1.0 - alpha, cfg)
    return TuneResult(
        epsilon=res.best.epsilon,
        report=res.best.payload,
        probes=res.probes,
        status=res.status,
        epsilon0=eps0,
        x_robust=rob.x,
        robust_converged=rob.converged,
        wall_time=time.perf_counter() - t0,
    )

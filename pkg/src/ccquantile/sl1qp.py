"""Trust-region Sl1QP method for the smoothed-quantile program.

The solver minimizes the exact l1 penalty

    phi(x) = f(x) + pi * ( ||[g(x)]^+||_1 + [Q_eps(C^N(x))]^+ )

where ``C^N(x)`` collects the per-scenario maxima ``max_j c_j(x, xi_i)``.
Each iteration solves the structured QP of :mod:`ccquantile.qp` inside an
infinity-norm trust region and accepts or rejects the step with the usual
actual-versus-predicted reduction ratio.

Problems without a stochastic block (``m == 0``) run through the same loop
with the quantile term dropped.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ccquantile.exceptions import ConvergenceError, InvalidArgumentError
from ccquantile.model import ScenarioSet, eval_scenario_values
from ccquantile.qp import OPTIMAL, QpSubproblem, regularize_hessian, solve_qp
from ccquantile.quantile import quantile_gradient, quantile_hessian, solve_quantile

CONVERGED = "converged"
STATIONARY = "stationary"
MAX_ITER = "max_iter"
RADIUS_COLLAPSE = "radius_collapse"


@dataclass(frozen=True)
class TrParams:
    """Penalty and trust-region controls."""

    penalty: float = 10.0
    delta_max: float = 1e6
    delta0: float = 1.0
    eta: float = 1e-8
    tau1: float = 0.5
    tau2: float = 2.0
    tol_kkt: float = 1e-6
    tol_feas_g: float = 1e-6
    tol_feas_q: float = 1e-6
    max_outer_iters: int = 200
    qp_tol: float = 1e-9
    qp_max_iters: int = 100

    def __post_init__(self):
        if not (self.penalty >= 0 and math.isfinite(self.penalty)):
            raise InvalidArgumentError("penalty must be finite and nonnegative")
        if not (0 < self.delta0 < self.delta_max):
            raise InvalidArgumentError("need 0 < delta0 < delta_max")
        if not (0 < self.eta < 1):
            raise InvalidArgumentError("eta must lie in (0, 1)")
        if not (0 < self.tau1 < 1 and self.tau2 > 1):
            raise InvalidArgumentError("need 0 < tau1 < 1 < tau2")
        if 1.0 / self.tau2 > self.tau1:
            raise InvalidArgumentError("need 1/tau2 <= tau1")
        if self.max_outer_iters < 1:
            raise InvalidArgumentError("max_outer_iters must be positive")


@dataclass
class Multipliers:
    """``nu`` for g rows, ``lam`` for the quantile row and the normalized
    scenario weights ``mu_bar`` (N x m)."""

    nu: np.ndarray
    lam: float
    mu_bar: np.ndarray

    @classmethod
    def initial(cls, ps, point):
        return cls(np.zeros(ps.p), 0.0, indicator_rows(point.maxred, ps.m) if point.maxred is not None else np.zeros((0, 0)))

    def copy(self):
        return Multipliers(self.nu.copy(), float(self.lam), self.mu_bar.copy())


def indicator_rows(maxred, m):
    out = np.zeros((maxred.values.size, m))
    out[np.arange(maxred.values.size), maxred.argmax_rows] = 1.0
    return out


@dataclass
class Point:
    """Everything evaluated at one iterate."""

    x: np.ndarray
    f: float
    g: np.ndarray
    maxred: object  # MaxReduction or None
    quant: object  # QuantileEval or None
    phi: float

    @property
    def Q(self):
        return self.quant.value if self.quant is not None else 0.0


class SmoothedProblem:
    """A problem bound to its scenarios, quantile level and kernel."""

    def __init__(self, ps, S, cfg, kernel, threads=1):
        self.ps = ps
        self.S = S
        self.cfg = cfg
        self.kernel = kernel
        self.threads = threads
        if ps.m > 0:
            if S is None or cfg is None or kernel is None:
                raise InvalidArgumentError("a stochastic problem needs scenarios, a quantile config and a kernel")
            if S.s != ps.s:
                raise InvalidArgumentError(f"scenario dimension {S.s} does not match the problem's s={ps.s}")
        self.xi = S.data if S is not None else None

    def point(self, x, penalty):
        x = np.asarray(x, dtype=float)
        f = float(self.ps.f(x))
        g = self.ps.eval_g(x)
        maxred = quant = None
        viol = float(np.sum(np.maximum(g, 0.0)))
        if self.ps.m > 0:
            maxred = eval_scenario_values(self.ps, x, self.S, threads=self.threads)
            quant = solve_quantile(maxred.values, self.cfg, self.kernel)
            viol += max(quant.value, 0.0)
        phi = f + penalty * viol
        if not math.isfinite(phi):
            raise ConvergenceError(f"non-finite penalty value at x={x}")
        return Point(x=x, f=f, g=g, maxred=maxred, quant=quant, phi=phi)


def penalty_value(ps, S, x, penalty, cfg=None, kernel=None):
    """``f(x) + pi * (||[g(x)]^+||_1 + [Q_eps(C^N(x))]^+)``."""
    return SmoothedProblem(ps, S, cfg, kernel).point(x, penalty).phi


def _window_jacobians(prob, point):
    win = point.quant.window
    return win, np.asarray(prob.ps.jac_c(point.x, prob.xi[win]), dtype=float).reshape(win.size, prob.ps.m, prob.ps.n)


def build_qp(prob, point, H, penalty, delta, win=None, Jwin=None):
    ps = prob.ps
    kwargs = dict(H=H, grad_f=ps.grad_f(point.x), penalty=penalty, delta=delta, g=point.g, Jg=ps.eval_jac_g(point.x))
    if ps.m > 0:
        if win is None:
            win, Jwin = _window_jacobians(prob, point)
        kwargs.update(
            c=point.maxred.rows[win],
            A=Jwin,
            C=point.maxred.values[win],
            a=quantile_gradient(point.quant)[win],
            Q=point.quant.value,
        )
    return QpSubproblem(**kwargs)


def model_value(prob, point, H, d, penalty):
    """Piecewise-quadratic model ``m(x, H; d)`` of the penalty function."""
    ps = prob.ps
    d = np.asarray(d, dtype=float)
    val = point.f + float(ps.grad_f(point.x) @ d) + 0.5 * float(d @ H @ d)
    viol = float(np.sum(np.maximum(point.g + ps.eval_jac_g(point.x) @ d, 0.0)))
    if ps.m > 0:
        win, Jwin = _window_jacobians(prob, point)
        a = quantile_gradient(point.quant)[win]
        ctil = (point.maxred.rows[win] + Jwin @ d).max(axis=1)
        viol += max(point.Q + float(a @ (ctil - point.maxred.values[win])), 0.0)
    return val + penalty * viol


def build_hessian(prob, point, mult, win=None, Jwin=None):
    """Hessian of the Lagrangian with the quantile curvature term.

    ``H = hess f + sum nu_j hess g_j + lam sum_i a_i sum_j mubar_ij hess c_ij
    + lam * Cbar hess(Q) Cbar^T`` with ``Cbar[:, i] = sum_j mubar_ij grad c_ij``;
    only scenarios in the kernel window contribute.
    """
    ps = prob.ps
    x = point.x
    H = np.array(ps.hess_f(x), dtype=float).reshape(ps.n, ps.n)
    if ps.p and np.any(mult.nu):
        H = H + ps.eval_hess_g(x, mult.nu)
    if ps.m > 0 and mult.lam != 0.0:
        if win is None:
            win, Jwin = _window_jacobians(prob, point)
        a = quantile_gradient(point.quant)[win]
        mub = mult.mu_bar[win]
        if ps.hess_c is not None:
            H = H + ps.eval_hess_c(x, prob.xi[win], mult.lam * a[:, None] * mub)
        cbar = np.einsum("ij,ijk->ki", mub, Jwin)
        H = H + mult.lam * quantile_hessian(point.quant).sandwich(cbar, index=win)
    return 0.5 * (H + H.T)


def recover_mu_bar(point, m, mu_win, lam, win):
    """Normalized scenario weights from the QP duals.

    ``mubar_i = mu_i / (lam a_i)`` where ``lam a_i`` is safely positive,
    otherwise the indicator of the lowest-index maximizing row.
    """
    mu_bar = indicator_rows(point.maxred, m)
    if win.size and lam > 0:
        a = quantile_gradient(point.quant)[win]
        scale = lam * a
        ok = scale > 1e-12 * (1.0 + lam)
        mu_bar[win[ok]] = np.maximum(mu_win[ok] / scale[ok, None], 0.0)
    return mu_bar


def kkt_residual(prob, point, mult, win=None, Jwin=None):
    """``(grad_norm, g_viol, q_viol)`` at ``point`` for the given multipliers."""
    ps = prob.ps
    grad = np.array(ps.grad_f(point.x), dtype=float)
    if ps.p:
        grad = grad + ps.eval_jac_g(point.x).T @ mult.nu
    if ps.m > 0 and mult.lam != 0.0:
        if win is None:
            win, Jwin = _window_jacobians(prob, point)
        a = quantile_gradient(point.quant)[win]
        grad = grad + mult.lam * np.einsum("i,ij,ijk->k", a, mult.mu_bar[win], Jwin)
    g_viol = max(0.0, float(np.max(point.g, initial=-math.inf))) if ps.p else 0.0
    q_viol = max(0.0, point.Q) if ps.m > 0 else 0.0
    return float(np.max(np.abs(grad), initial=0.0)), g_viol, q_viol


TRACE_FIELDS = (
    "iter", "phi", "delta", "d_norm", "rho", "grad_norm", "g_viol", "q_viol", "accepted",
    "pred", "ared", "qp_status", "qp_iters", "hess_shift",
)


@dataclass
class SolveReport:
    x: np.ndarray
    status: str
    converged: bool
    iterations: int  # trial steps evaluated; the final stationarity check is not counted
    multipliers: Multipliers
    grad_norm: float
    g_viol: float
    q_viol: float
    phi: float
    f: float
    Q: float
    delta: float
    epsilon: float | None
    N: int
    wall_time: float
    trace: list = field(default_factory=list)
    oos_probability: float | None = None

    @property
    def accepted_phis(self):
        return [row["phi_new"] for row in self.trace if row["accepted"]]

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
            wr.writeheader()
            for row in self.trace:
                wr.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})

    def summary(self):
        return {
            "status": self.status,
            "converged": self.converged,
            "iterations": self.iterations,
            "x": [float(v) for v in self.x],
            "objective": self.f,
            "phi": self.phi,
            "quantile": self.Q,
            "grad_norm": self.grad_norm,
            "g_viol": self.g_viol,
            "q_viol": self.q_viol,
            "lambda": self.multipliers.lam,
            "nu": [float(v) for v in self.multipliers.nu],
            "epsilon": self.epsilon,
            "N": self.N,
            "wall_time_s": self.wall_time,
            "oos_probability": self.oos_probability,
        }


def _within(kkt, tr):
    grad, gv, qv = kkt
    return grad <= tr.tol_kkt and gv <= tr.tol_feas_g and qv < tr.tol_feas_q


def _complementary(point, mult, tr):
    """Multipliers of clearly inactive constraints must be negligible."""
    if point.g.size and np.any(mult.nu * np.maximum(-point.g, 0.0) > tr.tol_kkt):
        return False
    if point.quant is not None and mult.lam * max(-point.Q, 0.0) > tr.tol_kkt:
        return False
    return True


def solve(ps, S, x0, cfg=None, kernel=None, tr=TrParams(), warm=None, threads=1, log=None):
    """Run the trust-region Sl1QP loop from ``x0``.

    ``warm`` optionally supplies multipliers (e.g. from a previous solve on
    the same scenarios) used for the first Hessian.
    """
    t_start = time.perf_counter()
    prob = SmoothedProblem(ps, S, cfg, kernel, threads=threads)
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (ps.n,) or not np.all(np.isfinite(x0)):
        raise InvalidArgumentError(f"x0 must be a finite vector of length {ps.n}")
    pi = tr.penalty
    point = prob.point(x0, pi)
    mult = warm.copy() if warm is not None else Multipliers.initial(ps, point)
    if ps.m > 0 and mult.mu_bar.shape != (S.N, ps.m):
        mult = Multipliers(mult.nu, mult.lam, indicator_rows(point.maxred, ps.m))
    delta = tr.delta0
    trace = []
    status = MAX_ITER
    kkt = kkt_residual(prob, point, mult)
    last_mult = mult
    converged = False
    it = 0
    for it in range(1, tr.max_outer_iters + 1):
        win = Jwin = None
        if ps.m > 0:
            win, Jwin = _window_jacobians(prob, point)
        H = build_hessian(prob, point, mult, win, Jwin)
        Hreg, shift = regularize_hessian(H)
        qp = build_qp(prob, point, Hreg, pi, delta, win, Jwin)
        sol = solve_qp(qp, tol=tr.qp_tol, max_iters=tr.qp_max_iters)
        pred = qp.reference_objective() - qp.model_objective(sol.d)
        if pred <= 0.0 and np.any(sol.d):
            # the model decrease is below the QP accuracy; one tighter solve
            # usually resolves it (interior-point convergence is quadratic)
            sol = solve_qp(qp, tol=1e-4 * tr.qp_tol, max_iters=2 * tr.qp_max_iters)
            pred = qp.reference_objective() - qp.model_objective(sol.d)

        new_mult = Multipliers(
            nu=sol.nu.copy(),
            lam=sol.lam,
            mu_bar=recover_mu_bar(point, ps.m, sol.mu, sol.lam, win) if ps.m > 0 else np.zeros((0, 0)),
        )
        kkt = kkt_residual(prob, point, new_mult, win, Jwin)
        last_mult = new_mult
        d = sol.d
        d_norm = float(np.max(np.abs(d), initial=0.0))
        row = {
            "iter": it, "phi": point.phi, "delta": delta, "d_norm": d_norm, "rho": math.nan,
            "grad_norm": kkt[0], "g_viol": kkt[1], "q_viol": kkt[2], "accepted": False,
            "pred": pred, "ared": math.nan, "qp_status": sol.status, "qp_iters": sol.iterations,
            "hess_shift": shift, "phi_new": point.phi, "x_new": point.x,
        }
        if _within(kkt, tr) and _complementary(point, new_mult, tr):
            trace.append(row)
            status, converged = CONVERGED, True
            it -= 1
            break
        if d_norm <= 1e-12 * max(1.0, float(np.max(np.abs(point.x)))) or pred <= 0.0:
            trace.append(row)
            status = STATIONARY
            it -= 1
            break
        trial = prob.point(point.x + d, pi)
        ared = point.phi - trial.phi
        rho = ared / pred
        row.update(ared=ared, rho=rho)
        if rho < tr.eta:
            delta = tr.tau1 * min(delta, d_norm)
        else:
            if d_norm >= delta * (1.0 - 1e-10):
                delta = min(tr.tau2 * delta, tr.delta_max)
            point = trial
            mult = new_mult
            row["accepted"] = True
            row["phi_new"] = trial.phi
            row["x_new"] = trial.x
        trace.append(row)
        if log is not None:
            log(row)
        if delta <= 1e-15 * max(1.0, float(np.max(np.abs(point.x)))):
            status = RADIUS_COLLAPSE
            break

    if status in (MAX_ITER, RADIUS_COLLAPSE):
        # report KKT data for the final iterate with the freshest multipliers
        kkt = kkt_residual(prob, point, last_mult)
    if not converged and status == STATIONARY:
        converged = _within(kkt, tr)
    return SolveReport(
        x=point.x.copy(),
        status=status,
        converged=converged,
        iterations=it,
        multipliers=last_mult,
        grad_norm=kkt[0],
        g_viol=kkt[1],
        q_viol=kkt[2],
        phi=point.phi,
        f=point.f,
        Q=point.Q,
        delta=delta,
        epsilon=kernel.epsilon if kernel is not None else None,
        N=S.N if isinstance(S, ScenarioSet) else 0,
        wall_time=time.perf_counter() - t_start,
        trace=trace,
    )

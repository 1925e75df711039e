"""Structured convex QP for the trust-region step.

Variables ``u = (d, t, z, w)``::

    minimize    grad_f^T d + 1/2 d^T H d + pi * (sum(t) + w)
    subject to  -Delta <= d <= Delta
                t >= 0,          g + J_g d <= t
                c_ij + A_ij^T d <= z_i        (scenario i, row j)
                Q + a^T (z - C) <= w,         w >= 0

``a`` is the gradient of the smoothed quantile (nonnegative, sums to one)
and ``C`` the per-scenario maxima at the current iterate.  Scenarios with
``a_i = 0`` do not influence the model: their ``z_i`` is set to the max
linearization afterwards and their multipliers are zero.  Dropping them also
keeps a strictly interior central path, which an interior-point method
needs.

The solver is a primal-dual Mehrotra predictor-corrector method.  The Newton
system ``(P + G^T D G) du = r`` is reduced block by block: ``t`` and ``w``
are eliminated elementwise, ``z`` through Sherman--Morrison on
``diag(S) + gamma a a^T``, leaving an ``n x n`` positive definite system.
Per iteration the work is ``O(N m n^2 + n^3)`` and no matrix of the full
dimension is ever formed.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ccquantile.exceptions import InvalidArgumentError, QpFailure

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class QpSubproblem:
    """Data of one trust-region subproblem.

    ``c`` (N, m), ``A`` (N, m, n), ``C`` (N,), ``a`` (N,) and ``Q`` describe
    the stochastic block; pass ``c=None`` for problems without one.
    """

    H: np.ndarray
    grad_f: np.ndarray
    penalty: float
    delta: float
    g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Jg: np.ndarray | None = None
    c: np.ndarray | None = None
    A: np.ndarray | None = None
    C: np.ndarray | None = None
    a: np.ndarray | None = None
    Q: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.grad_f = np.asarray(self.grad_f, dtype=float).ravel()
        n = self.grad_f.size
        if self.H.shape != (n, n):
            raise InvalidArgumentError(f"H must be {n}x{n}")
        self.g = np.asarray(self.g, dtype=float).ravel()
        self.Jg = np.zeros((0, n)) if self.Jg is None else np.asarray(self.Jg, dtype=float).reshape(self.g.size, n)
        if not (self.penalty > 0 and math.isfinite(self.penalty)):
            raise InvalidArgumentError("penalty must be positive")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise InvalidArgumentError("trust-region radius must be positive")
        if self.c is not None:
            self.c = np.atleast_2d(np.asarray(self.c, dtype=float))
            N, m = self.c.shape
            self.A = np.asarray(self.A, dtype=float).reshape(N, m, n)
            self.C = self.c.max(axis=1) if self.C is None else np.asarray(self.C, dtype=float).ravel()
            self.a = np.asarray(self.a, dtype=float).ravel()
            if self.a.shape != (N,) or np.any(self.a < 0):
                raise InvalidArgumentError("quantile weights must be a nonnegative N-vector")

    @property
    def n(self):
        return self.grad_f.size

    @property
    def p(self):
        return self.g.size

    @property
    def has_stochastic(self):
        return self.c is not None

    def linearized_max(self, d):
        """``max_j (c_ij + A_ij^T d)`` for every scenario."""
        return (self.c + self.A @ d).max(axis=1)

    def model_objective(self, d):
        """QP objective at ``d`` with ``t`` and ``w`` at their smallest feasible values."""
        t = np.maximum(self.g + self.Jg @ d, 0.0)
        obj = float(self.grad_f @ d + 0.5 * d @ self.H @ d + self.penalty * t.sum())
        if self.has_stochastic:
            w = max(self.Q + float(self.a @ (self.linearized_max(d) - self.C)), 0.0)
            obj += self.penalty * w
        return obj

    def reference_objective(self):
        """Objective of the always-feasible point ``d = 0``."""
        return self.model_objective(np.zeros(self.n))


@dataclass
class QpSolution:
    d: np.ndarray
    t: np.ndarray
    z: np.ndarray
    w: float
    nu: np.ndarray
    mu: np.ndarray
    lam: float
    box_upper: np.ndarray
    box_lower: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    objective: float


def regularize_hessian(H):
    """Return ``(H + shift * I, shift)`` with a Cholesky-factorizable result.

    ``shift`` is 0 when ``H + delta I`` already factors, with
    ``delta = 1e-8 * max(1, ||H||_inf)``; otherwise ``sigma`` doubles from
    ``1e-8 ||H||_inf`` until ``H + (sigma + delta) I`` factors.
    """
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    n = H.shape[0]
    if n == 0:
        return H, 0.0
    norm = float(np.max(np.sum(np.abs(H), axis=1)))
    delta = 1e-8 * max(1.0, norm)
    eye = np.eye(n)
    try:
        np.linalg.cholesky(H + delta * eye)
        return H, 0.0
    except np.linalg.LinAlgError:
        pass
    sigma = 1e-8 * max(norm, 1.0)
    for _ in range(200):
        try:
            np.linalg.cholesky(H + (sigma + delta) * eye)
            shift = sigma + delta
            return H + shift * eye, shift
        except np.linalg.LinAlgError:
            sigma *= 2.0
    raise QpFailure("Hessian regularization did not produce a factorizable matrix")


class _Rows:
    """Slack or dual values, one array per constraint block."""

    __slots__ = ("bu", "bl", "t", "g", "s", "q", "w")

    def __init__(self, bu, bl, t, g, s, q, w):
        self.bu, self.bl, self.t, self.g, self.s, self.q, self.w = bu, bl, t, g, s, q, w

    def arrays(self):
        return (self.bu, self.bl, self.t, self.g, self.s, self.q, self.w)

    def map(self, fn, *others):
        return _Rows(*(fn(a, *(o.arrays()[k] for o in others)) for k, a in enumerate(self.arrays())))

    def dot(self, other):
        return float(sum(np.sum(a * b) for a, b in zip(self.arrays(), other.arrays())))

    def min(self):
        return min((float(np.min(a)) for a in self.arrays() if a.size), default=math.inf)

    def max_abs(self):
        return max((float(np.max(np.abs(a))) for a in self.arrays() if a.size), default=0.0)

    def count(self):
        return sum(a.size for a in self.arrays())


def _max_step(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-x[neg] / dx[neg]))


class _Ipm:
    def __init__(self, qp, active):
        self.scale = min(1.0, qp.delta)
        sc = self.scale
        self.n, self.p = qp.n, qp.p
        self.P = qp.H * sc * sc
        self.qd = qp.grad_f * sc
        self.pi = float(qp.penalty)
        self.box = qp.delta / sc
        self.Jg = qp.Jg * sc
        self.gv = qp.g
        self.has_q = active.size > 0
        if self.has_q:
            self.A = qp.A[active] * sc
            self.c = qp.c[active]
            self.a = qp.a[active]
            self.hq = float(self.a @ qp.C[active]) - qp.Q
        else:
            self.A = np.zeros((0, 1, self.n))
            self.c = np.zeros((0, 1))
            self.a = np.zeros(0)
            self.hq = 0.0
        self.Na, self.m = self.c.shape

    # -- linear operators -------------------------------------------------
    def G(self, d, t, z, w):
        emp = np.zeros(0)
        return _Rows(
            d.copy(),
            -d,
            -t,
            self.Jg @ d - t,
            self.A @ d - z[:, None],
            np.array([self.a @ z - w]) if self.has_q else emp,
            np.array([-w]) if self.has_q else emp,
        )

    def GT(self, v):
        d = v.bu - v.bl + self.Jg.T @ v.g + np.einsum("ijk,ij->k", self.A, v.s)
        t = -v.t - v.g
        z = -v.s.sum(axis=1) + (v.q[0] * self.a if self.has_q else 0.0)
        w = (-v.q[0] - v.w[0]) if self.has_q else 0.0
        return d, t, z, w

    def h(self):
        emp = np.zeros(0)
        return _Rows(
            np.full(self.n, self.box),
            np.full(self.n, self.box),
            np.zeros(self.p),
            -self.gv,
            -self.c,
            np.array([self.hq]) if self.has_q else emp,
            np.zeros(1) if self.has_q else emp,
        )

    # -- residuals ---------------------------------------------------------
    def residuals(self, u, s, y):
        d, t, z, w = u
        gd, gt, gz, gw = self.GT(y)
        rd = (self.P @ d + self.qd + gd, self.pi + gt, gz, (self.pi + gw) if self.has_q else 0.0)
        Gu = self.G(d, t, z, w)
        rp = Gu.map(lambda a, b, c: a + b - c, s, self.h())
        return rd, rp

    def objective(self, u):
        d, t, z, w = u
        return float(self.qd @ d + 0.5 * d @ self.P @ d + self.pi * (t.sum() + (w if self.has_q else 0.0)))

    # -- Newton system -----------------------------------------------------
    def factor(self, D, Dinv):
        """Factor the reduced system for scaling ``D = y / s``.

        Eliminations of ``t`` and ``w`` use ``Dinv = s / y`` in harmonic
        form so that huge entries of ``D`` cannot overflow.
        """
        self.D = D
        K = self.P + np.diag(D.bu + D.bl)
        if self.p:
            isum = Dinv.t + Dinv.g
            self.t_hm = Dinv.t * Dinv.g / isum  # 1 / (D_t + D_g)
            self.t_wg = Dinv.t / isum  # D_g / (D_t + D_g)
            K += self.Jg.T @ ((1.0 / isum)[:, None] * self.Jg)
        if self.has_q:
            Ssum = D.s.sum(axis=1)
            self.Ssum = Ssum
            abar = np.einsum("ij,ijk->ik", D.s, self.A) / Ssum[:, None]
            self.abar = abar
            dev = self.A - abar[:, None, :]
            K += np.einsum("ij,ijk,ijl->kl", D.s, dev, dev)
            iq, iw = float(Dinv.q[0]), float(Dinv.w[0])
            self.gamma = 1.0 / (iq + iw)
            self.w_hm = iq * iw / (iq + iw)  # 1 / (D_q + D_w)
            self.w_wq = iw / (iq + iw)  # D_q / (D_q + D_w)
            self.sa = self.a / Ssum
            self.kappa = self.gamma / (1.0 + self.gamma * float(self.a @ self.sa))
            v = abar.T @ self.a
            K += self.kappa * np.outer(v, v)
        K = 0.5 * (K + K.T)
        try:
            self.chol = scipy.linalg.cho_factor(K, lower=False, check_finite=False)
            self.lu = None
        except np.linalg.LinAlgError:
            self.chol = None
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                try:
                    self.lu = scipy.linalg.lu_factor(K, check_finite=False)
                except scipy.linalg.LinAlgWarning as exc:  # exactly singular
                    raise np.linalg.LinAlgError(str(exc)) from None

    def _solve_dd(self, r):
        if self.chol is not None:
            return scipy.linalg.cho_solve(self.chol, r, check_finite=False)
        return scipy.linalg.lu_solve(self.lu, r, check_finite=False)

    def _minv(self, r):
        out = r / self.Ssum
        return out - self.kappa * self.sa * float(self.a @ out)

    def solve_K(self, rd, rt, rz, rw):
        rhs = rd.copy()
        if self.p:
            rhs += self.Jg.T @ (self.t_wg * rt)
        if self.has_q:
            rz2 = rz + self.a * (self.w_wq * rw)
            # B has columns -S_i * abar_i
            mz = self._minv(rz2)
            rhs -= -(self.abar.T @ (self.Ssum * mz))
            dd = self._solve_dd(rhs)
            BTd = -self.Ssum * (self.abar @ dd)
            dz = self._minv(rz2 - BTd)
            dw = self.w_hm * rw + self.w_wq * float(self.a @ dz)
        else:
            dd = self._solve_dd(rhs)
            dz, dw = np.zeros(0), 0.0
        dt = self.t_hm * rt + self.t_wg * (self.Jg @ dd) if self.p else np.zeros(0)
        return dd, dt, dz, dw

    def direction(self, u, s, y, rd, rp, rc):
        # v = D r_p - S^{-1} r_c ; rhs = -r_d - G^T v ; dy = D G du + v ; ds = -r_p - G du
        v = rp.map(lambda r, c, dd, ss: dd * r - c / ss, rc, self.D, s)
        gd, gt, gz, gw = self.GT(v)
        du = self.solve_K(-rd[0] - gd, -rd[1] - gt, -rd[2] - gz, (-rd[3] - gw) if self.has_q else 0.0)
        Gdu = self.G(*du)
        dy = Gdu.map(lambda gdu, dd, vv: dd * gdu + vv, self.D, v)
        ds = Gdu.map(lambda gdu, r: -r - gdu, rp)
        return du, ds, dy


def _step_length(s, ds, y, dy):
    alpha = 1.0
    for a, b in zip(s.arrays() + y.arrays(), ds.arrays() + dy.arrays()):
        if a.size:
            alpha = min(alpha, _max_step(a, b))
    return alpha


def _advance(u, du, alpha):
    return tuple(a + alpha * b for a, b in zip(u, du))


def solve_qp(qp, tol=1e-9, max_iters=100):
    """Solve the subproblem with a Mehrotra predictor-corrector method."""
    if qp.has_stochastic:
        active = np.flatnonzero(qp.a > 0.0)
        if active.size == 0:
            raise InvalidArgumentError("quantile weights are all zero")
    else:
        active = np.zeros(0, dtype=int)
    ipm = _Ipm(qp, active)
    n, p, Na, m = ipm.n, ipm.p, ipm.Na, ipm.m
    pi = ipm.pi

    # strictly interior start: every slack >= 1, duals stationary in (t, z, w)
    d = np.zeros(n)
    t = np.maximum(qp.g, 0.0) + 1.0
    if ipm.has_q:
        z = ipm.c.max(axis=1) + 1.0
        w = max(qp.Q + 1.0, 0.0) + 1.0
    else:
        z, w = np.zeros(0), 0.0
    u = (d, t, z, w)
    h = ipm.h()
    s = h.map(lambda hh, gu: hh - gu, ipm.G(*u))
    emp = np.zeros(0)
    y = _Rows(
        np.ones(n),
        np.ones(n),
        np.full(p, 0.5 * pi),
        np.full(p, 0.5 * pi),
        np.repeat((0.5 * pi * ipm.a / m)[:, None], m, axis=1) if ipm.has_q else np.zeros((0, 1)),
        np.array([0.5 * pi]) if ipm.has_q else emp,
        np.array([0.5 * pi]) if ipm.has_q else emp,
    )
    if s.min() <= 0:
        raise QpFailure("internal error: starting point not interior")

    qscale = 1.0 + max(float(np.max(np.abs(ipm.qd), initial=0.0)), pi)
    hscale = 1.0 + h.max_abs()
    nrows = s.count()

    def measures(u, s, y):
        rd, rp = ipm.residuals(u, s, y)
        rdn = max(float(np.max(np.abs(rd[0]), initial=0.0)), float(np.max(np.abs(rd[1]), initial=0.0)),
                  float(np.max(np.abs(rd[2]), initial=0.0)), abs(float(rd[3])))
        comp = max((float(np.max(a * b)) for a, b in zip(s.arrays(), y.arrays()) if a.size), default=0.0)
        res = max(rdn / qscale, rp.max_abs() / hscale, comp / (1.0 + abs(ipm.objective(u))))
        return rd, rp, res

    status = MAX_ITER
    best = (math.inf, u, s, y)
    it = 0
    for it in range(1, max_iters + 1):
        rd, rp, res = measures(u, s, y)
        if res < best[0]:
            best = (res, u, s, y)
        if res <= tol:
            status = OPTIMAL
            it -= 1
            break
        mu = s.dot(y) / nrows
        try:
            ipm.factor(y.map(lambda yy, ss: yy / ss, s), s.map(lambda ss, yy: ss / yy, y))
        except (np.linalg.LinAlgError, ValueError):
            status = NUMERICAL_FAILURE
            break
        rc = s.map(lambda ss, yy: ss * yy, y)
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            du, ds, dy = ipm.direction(u, s, y, rd, rp, rc)
        if not all(np.all(np.isfinite(np.asarray(x))) for x in du):
            status = NUMERICAL_FAILURE
            break
        alpha_aff = _step_length(s, ds, y, dy)
        s_aff = s.map(lambda a, b: a + alpha_aff * b, ds)
        y_aff = y.map(lambda a, b: a + alpha_aff * b, dy)
        sigma = (s_aff.dot(y_aff) / nrows / mu) ** 3 if mu > 0 else 0.0
        rc = s.map(lambda ss, yy, dss, dyy: ss * yy + dss * dyy - sigma * mu, y, ds, dy)
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            du, ds, dy = ipm.direction(u, s, y, rd, rp, rc)
        if not all(np.all(np.isfinite(np.asarray(x))) for x in du):
            status = NUMERICAL_FAILURE
            break
        alpha = min(1.0, 0.995 * _step_length(s, ds, y, dy))
        u = _advance(u, du, alpha)
        s = s.map(lambda a, b: a + alpha * b, ds)
        y = y.map(lambda a, b: a + alpha * b, dy)
        # guard against slacks/duals collapsing to exactly zero by rounding
        s = s.map(lambda a: np.maximum(a, 1e-300))
        y = y.map(lambda a: np.maximum(a, 1e-300))
    else:
        rd, rp, res = measures(u, s, y)
        if res <= tol:
            status = OPTIMAL
        if res < best[0]:
            best = (res, u, s, y)

    if status != OPTIMAL:
        res, u, s, y = best
        if status == NUMERICAL_FAILURE and not math.isfinite(res):
            raise QpFailure("QP solver broke down before producing an iterate")
    return _unpack(qp, ipm, active, u, s, y, status, it, res)


def _unpack(qp, ipm, active, u, s, y, status, iterations, res):
    sc = ipm.scale
    d, t, z, w = u
    d = d * sc
    ybu, ybl = y.bu / sc, y.bl / sc
    # snap coordinates whose bound is clearly active to the exact bound
    up = y.bu > s.bu
    lo = y.bl > s.bl
    d = np.where(up, qp.delta, d)
    d = np.where(lo, -qp.delta, d)
    d = np.clip(d, -qp.delta, qp.delta)
    N = qp.c.shape[0] if qp.has_stochastic else 0
    m = qp.c.shape[1] if qp.has_stochastic else 0
    mu = np.zeros((N, m))
    zfull = np.zeros(N)
    lam = 0.0
    if qp.has_stochastic:
        mu[active] = y.s
        zfull = qp.linearized_max(d)
        zfull[active] = np.maximum(z, zfull[active])
        lam = float(y.q[0])
        w = max(float(w), qp.Q + float(qp.a @ (zfull - qp.C)), 0.0)
    else:
        w = 0.0
    t = np.maximum(np.maximum(t, qp.g + qp.Jg @ d), 0.0) if qp.p else np.zeros(0)
    obj = float(qp.grad_f @ d + 0.5 * d @ qp.H @ d + qp.penalty * (t.sum() + w))
    return QpSolution(
        d=d,
        t=t,
        z=zfull,
        w=float(w),
        nu=y.g.copy(),
        mu=mu,
        lam=lam,
        box_upper=ybu,
        box_lower=ybl,
        status=status,
        iterations=iterations,
        kkt_residual=float(res),
        objective=obj,
    )


def stationarity_residual(qp, sol):
    """``||H d + grad_f + J_g^T nu + sum_ij mu_ij A_ij + box duals||_inf``."""
    r = qp.H @ sol.d + qp.grad_f + sol.box_upper - sol.box_lower
    if qp.p:
        r = r + qp.Jg.T @ sol.nu
    if qp.has_stochastic:
        r = r + np.einsum("ijk,ij->k", qp.A, sol.mu)
    return float(np.max(np.abs(r), initial=0.0))

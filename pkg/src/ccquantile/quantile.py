"""Smoothed sample quantile and its derivatives.

For a vector ``z`` of scenario values the smoothed ``(1 - alpha)``-quantile
``Q`` is the root of

    psi(Q) = sum_i Gamma(z_i - Q) - t*,    t* = (1 - alpha) N (+ b)

where ``b`` is added when ``(1 - alpha) N`` is an integer so that the root
is unique.  Derivatives with respect to ``z`` follow from the implicit
function theorem and only involve scenarios inside the kernel window
``|z_i - Q| < eps``.
"""

import math
from dataclasses import dataclass

import numpy as np

from ccquantile.exceptions import ConvergenceError, InvalidArgumentError


def _is_integral(v):
    return abs(v - round(v)) <= 1e-9 * max(1.0, abs(v))


def empirical_quantile(z, alpha):
    """``M``-th smallest entry of ``z`` with ``M = ceil((1 - alpha) N)``."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size == 0:
        raise InvalidArgumentError("empirical_quantile of an empty vector")
    level = (1.0 - alpha) * z.size
    m = int(round(level)) if _is_integral(level) else math.ceil(level)
    m = min(max(m, 1), z.size)
    return float(np.partition(z, m - 1)[m - 1])


@dataclass(frozen=True)
class QuantileConfig:
    """Risk level and root-finding controls for :func:`solve_quantile`.

    ``root_tol`` defaults to ``1e-10 * N`` when left as ``None``.
    """

    alpha: float
    b_shift: float = 0.5
    root_tol: float | None = None
    max_root_iters: int = 100

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidArgumentError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not (0.0 <= self.b_shift < 1.0):
            raise InvalidArgumentError(f"b_shift must lie in [0, 1), got {self.b_shift!r}")

    def target(self, n):
        """Right-hand side ``t*`` of the quantile equation for ``n`` scenarios."""
        level = (1.0 - self.alpha) * n
        if _is_integral(level):
            level = round(level) + self.b_shift
        if not (0.0 < level < n) or _is_integral(level):
            raise InvalidArgumentError(
                f"quantile target {level!r} must be a non-integer in (0, {n}); "
                "change alpha, N or b_shift"
            )
        return float(level)

    def tolerance(self, n):
        return 1e-10 * n if self.root_tol is None else float(self.root_tol)


@dataclass(frozen=True, eq=False)
class QuantileEval:
    """Root of the quantile equation plus kernel weights at the root.

    ``weights[i] = Gamma'(z_i - value)`` and
    ``weight_d[i] = Gamma''(z_i - value)``; both vanish outside the window.
    """

    value: float
    weights: np.ndarray
    weight_d: np.ndarray
    W: float
    W_d: float
    active_count: int
    target: float
    iterations: int = 0

    @property
    def window(self):
        """Indices of scenarios with nonzero kernel weight."""
        return np.flatnonzero(self.weights)


def _psi(zs, q, kernel, target):
    eps = kernel.epsilon
    left = int(np.searchsorted(zs, q - eps, side="right"))
    right = int(np.searchsorted(zs, q + eps, side="left"))
    y = zs[left:right] - q
    psi = left + float(np.sum(kernel.gamma(y))) - target
    dpsi = -float(np.sum(kernel.gamma_d1(y)))
    return psi, dpsi


def solve_quantile(z, cfg, kernel):
    """Solve ``sum_i Gamma(z_i - Q) = t*`` for ``Q``.

    Safeguarded Newton started at the empirical quantile.  ``psi`` is
    nondecreasing in ``Q``, so a shrinking bracket is kept and bisection
    is used whenever the Newton point leaves it or ``psi'`` is negligible.
    """
    z = np.asarray(z, dtype=float).ravel()
    n = z.size
    if n == 0:
        raise InvalidArgumentError("solve_quantile of an empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("scenario values must be finite")
    target = cfg.target(n)
    tol = cfg.tolerance(n)
    eps = kernel.epsilon
    zs = np.sort(z)
    iterations = 0

    if zs[0] == zs[-1]:
        q = float(zs[0]) - kernel.gamma_inverse(target / n)
    else:
        lo, hi = float(zs[0]) - eps, float(zs[-1]) + eps
        q = empirical_quantile(z, cfg.alpha)
        flat = 1e-12 * n / eps
        converged = False
        polish = 0
        while iterations < cfg.max_root_iters:
            psi, dpsi = _psi(zs, q, kernel, target)
            if psi == 0.0:
                converged = True
                break
            if abs(psi) <= tol:
                converged = True
                # quadratic convergence: a couple more Newton steps reach
                # machine precision, which finite-difference checks rely on
                if polish >= 2 or dpsi <= flat:
                    break
                polish += 1
            if psi < 0.0:
                lo = q
            else:
                hi = q
            iterations += 1
            cand = q - psi / dpsi if dpsi > flat else math.nan
            if lo < cand < hi:
                step = cand - q
                q = cand
                if converged and abs(step) <= 4e-16 * max(abs(q), eps):
                    break
            elif converged:
                break
            else:
                q = 0.5 * (lo + hi)
            if hi - lo <= 4e-16 * max(abs(lo), abs(hi), eps):
                converged = abs(_psi(zs, q, kernel, target)[0]) <= tol
                break
        if not converged:
            raise ConvergenceError(f"quantile root not found in {cfg.max_root_iters} iterations")

    y = z - q
    weights = np.asarray(kernel.gamma_d1(y), dtype=float).reshape(n)
    weight_d = np.asarray(kernel.gamma_d2(y), dtype=float).reshape(n)
    W = float(np.sum(weights))
    if not W < 0.0:
        raise RuntimeError("empty kernel window at the quantile root")
    return QuantileEval(
        value=float(q),
        weights=weights,
        weight_d=weight_d,
        W=W,
        W_d=float(np.sum(weight_d)),
        active_count=int(np.count_nonzero(weights)),
        target=target,
        iterations=iterations,
    )


def quantile_gradient(q):
    """Gradient of ``Q`` with respect to ``z``: ``w_i / W``."""
    return q.weights / q.W + 0.0  # + 0.0 turns -0.0 into 0.0


class QuantileHessian:
    """Hessian of ``Q`` with respect to ``z`` in rank-2-plus-diagonal form.

        H = (W'/W^3) w w^T - (1/W^2)(w w'^T + w' w^T) + (1/W) diag(w')
    """

    def __init__(self, q):
        self.w = q.weights
        self.wd = q.weight_d
        self.W = q.W
        self.W_d = q.W_d
        self.outer_coef = self.W_d / self.W**3
        self.cross_coef = -1.0 / self.W**2
        self.diag = self.wd / self.W

    @property
    def size(self):
        return self.w.size

    def entry(self, i, j):
        w, wd, W, Wd = self.w, self.wd, self.W, self.W_d
        if i == j:
            return (w[i] ** 2 * Wd - 2.0 * w[i] * wd[i] * W + wd[i] * W**2) / W**3
        return (w[i] * w[j] * Wd - W * (w[i] * wd[j] + wd[i] * w[j])) / W**3

    def dense(self):
        w, wd = self.w, self.wd
        cross = np.outer(w, wd)
        return self.outer_coef * np.outer(w, w) + self.cross_coef * (cross + cross.T) + np.diag(self.diag)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        w, wd = self.w, self.wd
        return (
            self.outer_coef * w * (w @ v)
            + self.cross_coef * (w * (wd @ v) + wd * (w @ v))
            + self.diag * v
        )

    def sandwich(self, A, index=None):
        """``A @ H @ A.T`` for ``A`` of shape ``(n, N)`` in O(n N + n^2 k).

        With ``index`` given, ``A`` holds only the columns ``index`` (the
        remaining columns are treated as zero); passing the kernel window
        gives the full product at window cost.
        """
        A = np.asarray(A, dtype=float)
        if index is None:
            w, wd, diag = self.w, self.wd, self.diag
        else:
            w, wd, diag = self.w[index], self.wd[index], self.diag[index]
        aw = A @ w
        awd = A @ wd
        cross = np.outer(aw, awd)
        out = self.outer_coef * np.outer(aw, aw) + self.cross_coef * (cross + cross.T)
        idx = np.flatnonzero(diag)
        if idx.size:
            Ak = A[:, idx]
            out += (Ak * diag[idx]) @ Ak.T
        return out


def quantile_hessian(q):
    return QuantileHessian(q)

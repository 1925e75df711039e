"""Smoothed step functions built from compactly supported kernels.

``Gamma(y)`` equals 1 for ``y <= -eps``, 0 for ``y >= eps`` and decreases
smoothly in between.  It replaces the indicator ``1(y <= 0)`` in the
empirical CDF of the constraint values.
"""

import abc
import math

import numpy as np

from ccquantile.exceptions import InvalidArgumentError


def _window(y, epsilon):
    arr = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("kernel argument must be finite")
    u = np.atleast_1d(arr / epsilon)
    return arr.ndim == 0, u, np.abs(u) < 1.0


class SmoothingKernel(abc.ABC):
    """Interface for smoothed indicators with support ``[-epsilon, epsilon]``.

    Subclasses implement the scaled step ``gamma`` and its first two
    derivatives on ``u = y / epsilon`` in ``(-1, 1)``; clamping outside the
    window is handled here.
    """

    def __init__(self, epsilon):
        epsilon = float(epsilon)
        if not math.isfinite(epsilon) or epsilon <= 0.0:
            raise InvalidArgumentError(f"epsilon must be positive and finite, got {epsilon!r}")
        self.epsilon = epsilon

    def __repr__(self):
        return f"{type(self).__name__}(epsilon={self.epsilon!r})"

    @abc.abstractmethod
    def _step(self, u):
        """Step value on the open window, as a function of ``u``."""

    @abc.abstractmethod
    def _step_d1(self, u):
        """d/du of the step on the open window."""

    @abc.abstractmethod
    def _step_d2(self, u):
        """d^2/du^2 of the step on the open window."""

    def gamma(self, y):
        scalar, u, inside = _window(y, self.epsilon)
        out = np.where(u <= -1.0, 1.0, 0.0)
        out[inside] = self._step(u[inside])
        return float(out[0]) if scalar else out

    def gamma_d1(self, y):
        scalar, u, inside = _window(y, self.epsilon)
        out = np.zeros_like(u)
        out[inside] = self._step_d1(u[inside]) / self.epsilon
        return float(out[0]) if scalar else out

    def gamma_d2(self, y):
        scalar, u, inside = _window(y, self.epsilon)
        out = np.zeros_like(u)
        out[inside] = self._step_d2(u[inside]) / (self.epsilon * self.epsilon)
        return float(out[0]) if scalar else out

    def gamma_inverse(self, v, tol=1e-12, max_iter=200):
        """Return the unique ``y`` in ``(-eps, eps)`` with ``gamma(y) == v``.

        Safeguarded Newton on ``u = y / eps``; the bracket ``[-1, 1]``
        shrinks every iteration and bisection takes over whenever the
        Newton point leaves it.
        """
        v = float(v)
        if not (0.0 < v < 1.0):
            raise InvalidArgumentError(f"gamma_inverse needs 0 < v < 1, got {v!r}")
        lo, hi = -1.0, 1.0  # step(lo) = 1 > v > 0 = step(hi)
        u = 0.0
        for _ in range(max_iter):
            r = float(self._step(np.asarray(u))) - v
            if abs(r) <= tol:
                break
            if r > 0.0:
                lo = u
            else:
                hi = u
            slope = float(self._step_d1(np.asarray(u)))
            cand = u - r / slope if slope != 0.0 else lo - 1.0
            u = cand if lo < cand < hi else 0.5 * (lo + hi)
            if hi - lo <= 4.0 * np.finfo(float).eps:
                break
        return u * self.epsilon


class QuarticKernel(SmoothingKernel):
    """Step obtained by integrating the quartic (biweight) kernel.

    On the window, with ``u = y / eps``::

        gamma(y) = 15/16 * (-u**5/5 + 2*u**3/3 - u + 8/15)

    which makes the step twice continuously differentiable.
    """

    def _step(self, u):
        v = u * u
        # 1/2 - (15/16) u (1 - 2/3 v + 1/5 v^2), Horner in v
        return 0.5 - 0.9375 * u * (1.0 + v * (-2.0 / 3.0 + v * 0.2))

    def _step_d1(self, u):
        one_minus = 1.0 - u * u
        return -0.9375 * one_minus * one_minus

    def _step_d2(self, u):
        return 3.75 * u * (1.0 - u * u)

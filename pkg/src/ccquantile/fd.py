"""Central finite-difference helpers used by derivative self-checks."""

import numpy as np


def fd_gradient(fun, x, h=1e-6):
    """Central-difference gradient of scalar ``fun`` at ``x``.

    ``h`` is a relative step: coordinate ``i`` moves by ``h * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (fun(xp) - fun(xm)) / (2.0 * step)
    return out


def fd_jacobian(fun, x, h=1e-6):
    """Central-difference Jacobian of vector ``fun``; shape ``(len(fun(x)), n)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        diff = (np.asarray(fun(xp), dtype=float) - np.asarray(fun(xm), dtype=float)) / (2.0 * step)
        cols.append(np.atleast_1d(diff))
    return np.stack(cols, axis=-1)


def relative_error(approx, exact, floor=1.0):
    """``max |approx - exact| / max(floor, max |exact|)``."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(floor, float(np.max(np.abs(exact))) if exact.size else 0.0)
    return float(np.max(np.abs(approx - exact))) / scale if exact.size else 0.0

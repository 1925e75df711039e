"""Brute-force reference implementations used only by the tests."""

import itertools

import numpy as np


def dense_qp(qp):
    """Dense ``(P, q, G, h)`` over ``u = (d, t, z, w)`` (all scenarios kept)."""
    n, p = qp.n, qp.p
    N, m = (qp.c.shape if qp.has_stochastic else (0, 0))
    nw = 1 if qp.has_stochastic else 0
    dim = n + p + N + nw
    P = np.zeros((dim, dim))
    P[:n, :n] = qp.H
    q = np.zeros(dim)
    q[:n] = qp.grad_f
    q[n : n + p] = qp.penalty
    if nw:
        q[-1] = qp.penalty
    rows, rhs = [], []

    def row():
        return np.zeros(dim)

    for k in range(n):
        r = row(); r[k] = 1.0; rows.append(r); rhs.append(qp.delta)
        r = row(); r[k] = -1.0; rows.append(r); rhs.append(qp.delta)
    for j in range(p):
        r = row(); r[n + j] = -1.0; rows.append(r); rhs.append(0.0)
        r = row(); r[:n] = qp.Jg[j]; r[n + j] = -1.0; rows.append(r); rhs.append(-qp.g[j])
    for i in range(N):
        for j in range(m):
            r = row(); r[:n] = qp.A[i, j]; r[n + p + i] = -1.0; rows.append(r); rhs.append(-qp.c[i, j])
    if nw:
        r = row(); r[n + p : n + p + N] = qp.a; r[-1] = -1.0; rows.append(r); rhs.append(float(qp.a @ qp.C) - qp.Q)
        r = row(); r[-1] = -1.0; rows.append(r); rhs.append(0.0)
    return P, q, np.array(rows), np.array(rhs)


def active_set_qp(P, q, G, h, feas_tol=1e-9):
    """Minimize ``q^T u + u^T P u / 2`` s.t. ``G u <= h`` by trying every
    active set whose KKT matrix is nonsingular.  Returns ``(obj, u)``."""
    dim = q.size
    ncon = G.shape[0]
    best = (np.inf, None)
    for k in range(0, min(dim, ncon) + 1):
        if k == 0:
            subsets = np.zeros((1, 0), dtype=int)
        else:
            subsets = np.array(list(itertools.combinations(range(ncon), k)), dtype=int)
        size = dim + k
        K = np.zeros((subsets.shape[0], size, size))
        K[:, :dim, :dim] = P
        rhs = np.zeros((subsets.shape[0], size))
        rhs[:, :dim] = -q
        if k:
            GS = G[subsets]  # (S, k, dim)
            K[:, :dim, dim:] = np.transpose(GS, (0, 2, 1))
            K[:, dim:, :dim] = GS
            rhs[:, dim:] = h[subsets]
        sign, logdet = np.linalg.slogdet(K)
        ok = (sign != 0) & (logdet > np.log(1e-12))
        if not np.any(ok):
            continue
        sol = np.linalg.solve(K[ok], rhs[ok][..., None])[..., 0]
        u = sol[:, :dim]
        lam = sol[:, dim:]
        feas = np.all(u @ G.T <= h + feas_tol, axis=1) & np.all(lam >= -feas_tol, axis=1)
        if not np.any(feas):
            continue
        uf = u[feas]
        obj = uf @ q + 0.5 * np.einsum("si,ij,sj->s", uf, P, uf)
        j = int(np.argmin(obj))
        if obj[j] < best[0]:
            best = (float(obj[j]), uf[j])
    return best

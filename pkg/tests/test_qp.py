import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccquantile.exceptions import InvalidArgumentError
from ccquantile.qp import OPTIMAL, QpSubproblem, regularize_hessian, solve_qp, stationarity_residual
from oracles import active_set_qp, dense_qp


def random_qp(rng, n, p, N, m, penalty=None, all_active=True):
    M = rng.normal(size=(n, n))
    H = M @ M.T / n + 1e-3 * np.eye(n)
    a = rng.random(N) + (0.1 if all_active else 0.0)
    if not all_active:
        a[rng.random(N) < 0.4] = 0.0
        if not a.any():
            a[0] = 1.0
    a /= a.sum()
    c = rng.normal(size=(N, m)) if N else None
    return QpSubproblem(
        H=H,
        grad_f=rng.normal(size=n) * 3,
        penalty=float(rng.uniform(0.5, 10)) if penalty is None else penalty,
        delta=float(rng.uniform(0.1, 2.0)),
        g=rng.normal(size=p),
        Jg=rng.normal(size=(p, n)),
        c=c,
        A=rng.normal(size=(N, m, n)) if N else None,
        a=a if N else None,
        Q=float(rng.normal()) if N else 0.0,
    )


def test_clipped_newton_step():
    sol = solve_qp(QpSubproblem(H=[[1.0]], grad_f=[-1.0], penalty=1.0, delta=0.5))
    assert sol.status == OPTIMAL
    assert sol.d[0] == pytest.approx(0.5, abs=1e-12)
    assert sol.nu.size == 0 and sol.mu.size == 0


def test_infeasible_linearization_lp():
    sol = solve_qp(QpSubproblem(H=[[0.0]], grad_f=[0.0], penalty=10.0, delta=0.5, g=[1.0], Jg=[[-1.0]]))
    assert sol.status == OPTIMAL
    assert sol.d[0] == pytest.approx(0.5, abs=1e-8)
    assert sol.t[0] == pytest.approx(0.5, abs=1e-8)
    assert sol.nu[0] == pytest.approx(10.0, abs=1e-7)
    P, q, G, h = dense_qp(QpSubproblem(H=[[0.0]], grad_f=[0.0], penalty=10.0, delta=0.5, g=[1.0], Jg=[[-1.0]]))
    obj, _ = active_set_qp(P, q, G, h)
    assert obj == pytest.approx(5.0, abs=1e-10)


def _sizes(rng):
    while True:
        n = int(rng.integers(1, 4))
        p = int(rng.integers(0, 3))
        N = int(rng.integers(0, 4))
        m = int(rng.integers(1, 3))
        dim = n + p + N + (1 if N else 0)
        ncon = 2 * n + 2 * p + N * m + (2 if N else 0)
        if dim <= 8 and ncon <= 13:
            return n, p, N, m


def run_oracle_batch(count, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        qp = random_qp(rng, *_sizes(rng))
        sol = solve_qp(qp)
        assert sol.status == OPTIMAL
        obj_ref, _ = active_set_qp(*dense_qp(qp))
        worst = max(worst, abs(sol.objective - obj_ref) / max(1.0, abs(obj_ref)))
    return worst


def test_matches_active_set_oracle():
    assert run_oracle_batch(60, seed=1) <= 1e-8


def test_inactive_scenarios_are_excluded_but_consistent():
    rng = np.random.default_rng(8)
    for _ in range(30):
        qp = random_qp(rng, 2, 1, 4, 2, all_active=False)
        sol = solve_qp(qp)
        assert sol.status == OPTIMAL
        zero = qp.a == 0
        assert np.all(sol.mu[zero] == 0)
        np.testing.assert_allclose(sol.z[zero], qp.linearized_max(sol.d)[zero])
        # inactive scenarios do not matter: compare against the oracle on the active subset
        act = ~zero
        sub = QpSubproblem(H=qp.H, grad_f=qp.grad_f, penalty=qp.penalty, delta=qp.delta, g=qp.g, Jg=qp.Jg,
                           c=qp.c[act], A=qp.A[act], C=qp.C[act], a=qp.a[act], Q=qp.Q)
        obj_ref, _ = active_set_qp(*dense_qp(sub))
        assert sol.objective == pytest.approx(obj_ref, abs=1e-8 * max(1, abs(obj_ref)))


def test_knapsack_scale_kkt_and_structure():
    rng = np.random.default_rng(3)
    qp = random_qp(rng, 20, 41, 500, 10, penalty=10.0, all_active=False)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    assert sol.kkt_residual <= 1e-9
    assert np.all(sol.mu >= 0) and sol.lam >= 0 and np.all(sol.nu >= 0)
    assert stationarity_residual(qp, sol) <= 1e-6
    assert sol.objective <= qp.reference_objective() + 1e-9
    assert np.max(np.abs(sol.d)) <= qp.delta
    # scenario duals sum to lambda * a_i  (stationarity in z)
    np.testing.assert_allclose(sol.mu.sum(axis=1), sol.lam * qp.a, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_decrease_and_dual_signs(seed):
    rng = np.random.default_rng(seed)
    qp = random_qp(rng, 3, 2, 5, 2, all_active=False)
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL
    assert sol.objective <= qp.reference_objective() + 1e-9
    assert qp.model_objective(sol.d) == pytest.approx(sol.objective, abs=1e-7)
    assert np.all(sol.mu >= 0) and sol.lam >= 0 and np.all(sol.nu >= 0)
    assert np.all(sol.box_upper >= 0) and np.all(sol.box_lower >= 0)
    assert stationarity_residual(qp, sol) <= 1e-6 * (1 + qp.penalty)


def test_penalty_scaling_keeps_feasible_set():
    rng = np.random.default_rng(12)
    qp = random_qp(rng, 2, 2, 3, 1, penalty=2.0)
    base = solve_qp(qp)
    qp.penalty = 20.0
    big = solve_qp(qp)
    # larger penalty never increases total violation of the linearized constraints
    assert big.t.sum() + big.w <= base.t.sum() + base.w + 1e-8
    assert np.all(big.nu <= 20.0 + 1e-7) and big.lam <= 20.0 + 1e-7
    assert np.all(base.nu <= 2.0 + 1e-7) and base.lam <= 2.0 + 1e-7


def test_tiny_and_huge_radius():
    rng = np.random.default_rng(4)
    qp = random_qp(rng, 3, 1, 3, 2)
    qp.delta = 1e-9
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL and np.max(np.abs(sol.d)) <= 1e-9
    qp.delta = 1e6
    sol = solve_qp(qp)
    assert sol.status == OPTIMAL


def test_invalid_inputs():
    with pytest.raises(InvalidArgumentError):
        QpSubproblem(H=[[1.0]], grad_f=[0.0], penalty=0.0, delta=1.0)
    with pytest.raises(InvalidArgumentError):
        QpSubproblem(H=[[1.0]], grad_f=[0.0], penalty=1.0, delta=-1.0)
    with pytest.raises(InvalidArgumentError):
        QpSubproblem(H=np.eye(2), grad_f=[0.0], penalty=1.0, delta=1.0)


def test_regularize_hessian():
    H = np.diag([1.0, 2.0])
    Hr, shift = regularize_hessian(H)
    assert shift == 0.0
    Hr, shift = regularize_hessian(-np.eye(3))
    assert shift >= 1.0
    np.linalg.cholesky(Hr)
    rng = np.random.default_rng(0)
    for _ in range(20):
        M = rng.normal(size=(5, 5))
        Hr, shift = regularize_hessian(M + M.T)
        np.linalg.cholesky(Hr)
        assert shift >= 0

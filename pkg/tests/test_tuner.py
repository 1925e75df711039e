import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from ccquantile.exceptions import InvalidArgumentError
from ccquantile.instances import builtin_knapsack, builtin_reinsurance
from ccquantile.model import ProblemSpec, ScenarioSet, sample
from ccquantile.rng import VALIDATION
from ccquantile.sl1qp import CONVERGED, TrParams
from ccquantile.tuner import (
    NO_FEASIBLE_PROBE,
    OK,
    TunerConfig,
    bisect_epsilon,
    initial_epsilon,
    oos_probability,
    oos_probability_sampled,
    robust_solve,
    tune,
)


def shift_problem(n=1):
    """Single stochastic row ``c(x, xi) = xi_0 + x_0``; objective ``-x_0``."""
    return ProblemSpec(
        n=n, p=0, m=1, s=1,
        f=lambda x: float(-x[0]), grad_f=lambda x: -np.eye(n)[0], hess_f=lambda x: np.zeros((n, n)),
        g=lambda x: np.zeros(0), jac_g=lambda x: np.zeros((0, n)),
        c=lambda x, xi: (xi[:, 0] + x[0])[:, None],
        jac_c=lambda x, xi: np.tile(np.eye(n)[0], (xi.shape[0], 1, 1)),
        name="shift",
    )


def stub(p_of_eps):
    calls = []

    def evaluate(eps):
        calls.append(eps)
        return p_of_eps(eps), eps, {"eps": eps}  # larger eps: more conservative, worse objective

    return evaluate, calls


# ---------------------------------------------------------------- bisection


def test_first_probe_within_tolerance():
    evaluate, calls = stub(lambda e: 0.95)
    res = bisect_epsilon(1.0, evaluate, 0.95, TunerConfig())
    assert calls == [1.0] and res.best.epsilon == 1.0 and res.status == OK


def test_monotone_stub_halves_bracket():
    # p crosses the target at eps = 0.3
    evaluate, calls = stub(lambda e: 0.95 + 0.1 * (e - 0.3))
    res = bisect_epsilon(1.0, evaluate, 0.95, TunerConfig(prob_tol=1e-9))
    assert len(calls) <= 11
    widths = [pr.eps_ub - pr.eps_lb for pr in res.probes if math.isfinite(pr.eps_ub)]
    for a, b in zip(widths, widths[1:]):
        assert b == pytest.approx(a / 2)
    for pr in res.probes:
        if math.isfinite(pr.eps_ub):
            assert pr.eps_lb < pr.epsilon < pr.eps_ub
    assert res.best.p >= 0.95 - 1e-9
    assert abs(res.best.epsilon - 0.3) < 1.0 / 2**9


def test_doubling_until_upper_bracket():
    evaluate, calls = stub(lambda e: 0.9 if e < 5.0 else 0.99)
    bisect_epsilon(1.0, evaluate, 0.95, TunerConfig(max_bisections=4))
    assert calls[:4] == [1.0, 2.0, 4.0, 8.0]
    assert calls[4] == 6.0


def test_all_feasible_returns_smallest_probe():
    evaluate, calls = stub(lambda e: 0.999)
    res = bisect_epsilon(1.0, evaluate, 0.95, TunerConfig())
    assert len(calls) == 11
    assert res.best.epsilon == min(calls) == 1.0 / 2**10
    assert res.status == OK


def test_no_feasible_probe_returns_largest():
    evaluate, calls = stub(lambda e: 0.5)
    res = bisect_epsilon(1.0, evaluate, 0.95, TunerConfig(max_bisections=3))
    assert res.status == NO_FEASIBLE_PROBE
    assert res.best.epsilon == max(calls) == 8.0


def test_feasibility_first_selection():
    values = {1.0: 0.96, 0.5: 0.94}
    evaluate, _ = stub(lambda e: values.get(e, 0.9495))
    res = bisect_epsilon(1.0, evaluate, 0.95, TunerConfig(max_bisections=2))
    # 0.75 has p within tolerance of the target but below it: 0.9495 < 0.95 - 1e-4
    assert res.best.epsilon == 1.0


@settings(max_examples=40, deadline=None)
@given(cross=st.floats(1e-3, 50.0), eps0=st.floats(1e-2, 10.0))
def test_bracket_invariant(cross, eps0):
    evaluate, calls = stub(lambda e: 0.95 + (0.02 if e > cross else -0.02))
    res = bisect_epsilon(eps0, evaluate, 0.95, TunerConfig())
    assert len(calls) <= 11
    for pr in res.probes:
        assert pr.eps_lb < pr.epsilon
        if math.isfinite(pr.eps_ub):
            assert pr.epsilon < pr.eps_ub
    feasible = [pr for pr in res.probes if pr.p >= 0.95 - 1e-4]
    if feasible:
        assert res.best.epsilon == min(pr.epsilon for pr in feasible)


def test_tuner_config_validation():
    for kwargs in ({"prob_tol": 0.0}, {"max_bisections": 0}, {"oos_sample_size": 999}, {"epsilon_0_multiplier": 0}):
        with pytest.raises(InvalidArgumentError):
            TunerConfig(**kwargs)
    with pytest.raises(InvalidArgumentError):
        bisect_epsilon(0.0, lambda e: (1, 0, None), 0.95, TunerConfig())


# ---------------------------------------------------------------- epsilon_0


def test_initial_epsilon_examples():
    ps = shift_problem()
    S = ScenarioSet(np.array([[-1.0], [1.0]]))
    assert initial_epsilon(ps, S, np.zeros(1)) == pytest.approx(2 * math.sqrt(2))
    const = ScenarioSet(np.full((5, 1), 3.0))
    assert initial_epsilon(ps, const, np.zeros(1)) == pytest.approx(2 * 3e-3)
    zero = ScenarioSet(np.zeros((5, 1)))
    assert initial_epsilon(ps, zero, np.zeros(1)) == pytest.approx(2e-6)
    data = np.random.default_rng(0).normal(size=(100, 1))
    base = initial_epsilon(ps, ScenarioSet(data), np.zeros(1), mult=1.0)
    assert initial_epsilon(ps, ScenarioSet(7.5 * data), np.zeros(1), mult=1.0) == pytest.approx(7.5 * base)


# ---------------------------------------------------------------- oos


def test_oos_probability_examples():
    ps = shift_problem()
    S = ScenarioSet(np.zeros((10, 1)))
    assert oos_probability(ps, np.array([-1.0]), S) == 1.0
    assert oos_probability(ps, np.array([1.0]), S) == 0.0
    half = ScenarioSet(np.array([[-2.0]] * 5 + [[2.0]] * 5))
    assert oos_probability(ps, np.zeros(1), half) == 0.5


def test_oos_sampled_matches_materialized():
    inst = builtin_knapsack()
    x = np.full(20, 0.45)
    S = sample(inst.generator_id, inst.params, 12_345, 3, stream=VALIDATION)
    direct = oos_probability(inst.problem, x, S)
    chunked = oos_probability_sampled(inst.problem, inst.generator_id, inst.params, x, 12_345, 3, chunk=1000)
    assert direct == chunked


# ---------------------------------------------------------------- robust


def test_robust_solve_matches_lp_on_mean_instance():
    inst = builtin_knapsack(q=1.0, rel_std=1e-7)
    ps = inst.problem
    S = sample(inst.generator_id, inst.params, 5, 0)
    rep = robust_solve(ps, S, np.zeros(20))
    assert rep.status == CONVERGED
    mu, cap, profit = inst.info["mu"], inst.info["capacity"], inst.info["profit"]
    lp = linprog(-profit, A_ub=mu, b_ub=cap, bounds=[(0, 1)] * 20, method="highs")
    assert rep.f * inst.info["unit"] == pytest.approx(lp.fun, rel=1e-5)


def test_robust_solution_is_scenario_feasible_and_improves_on_zero():
    inst = builtin_knapsack()
    S = sample(inst.generator_id, inst.params, 30, 1)
    rep = robust_solve(inst.problem, S, np.zeros(20))
    assert rep.converged
    assert rep.f <= inst.problem.f(np.zeros(20))
    assert oos_probability(inst.problem, rep.x, S) == 1.0 or np.max(inst.problem.c(rep.x, S.data)) <= 1e-6


def test_robust_solve_without_stochastic_rows():
    ps = ProblemSpec(
        n=2, p=1, m=0, s=0,
        f=lambda x: float((x - 1) @ (x - 1)), grad_f=lambda x: 2 * (x - 1), hess_f=lambda x: 2 * np.eye(2),
        g=lambda x: np.array([x[0] + x[1] - 1.0]), jac_g=lambda x: np.array([[1.0, 1.0]]),
        c=lambda x, xi: np.zeros((len(xi), 0)), jac_c=lambda x, xi: np.zeros((len(xi), 0, 2)),
    )
    rep = robust_solve(ps, None, np.zeros(2))
    assert rep.converged and np.allclose(rep.x, [0.5, 0.5], atol=1e-8)


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def reinsurance_tune():
    inst = builtin_reinsurance()
    S = sample(inst.generator_id, inst.params, 200, 0)
    S_val = sample(inst.generator_id, inst.params, 20_000, 0, stream=VALIDATION)
    cfg = TunerConfig(oos_sample_size=20_000)
    return inst, S, S_val, cfg, tune(inst.problem, S, inst.alpha, S_val, cfg, TrParams(), x0=inst.x0)


def test_tune_end_to_end(reinsurance_tune, tmp_path):
    inst, S, S_val, cfg, res = reinsurance_tune
    assert 1 <= len(res.probes) <= 11
    assert res.robust_converged and res.epsilon0 > 0
    assert res.report.converged
    assert res.p_oos >= 0.95 - cfg.prob_tol
    assert res.p_oos == oos_probability(inst.problem, res.report.x, S_val)
    path = tmp_path / "tuner.csv"
    res.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "probe,epsilon,p_oos,objective,iters,wall_ms,status,eps_lb,eps_ub"
    assert len(lines) == len(res.probes) + 1


def test_tune_is_deterministic(reinsurance_tune):
    inst, S, S_val, cfg, res = reinsurance_tune
    again = tune(inst.problem, S, inst.alpha, S_val, cfg, TrParams(), x0=inst.x0)
    assert [p.epsilon for p in again.probes] == [p.epsilon for p in res.probes]
    assert [p.p for p in again.probes] == [p.p for p in res.probes]
    assert np.array_equal(again.report.x, res.report.x)

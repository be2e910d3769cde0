import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_problem
from oracles import central_difference
from rsvr.baselines import sdma_opt
from rsvr.cccp import (CccpSettings, initial_point, linearize, minorants_at, multi_start,
                       solve_cccp)
from rsvr.conic import Affine, ConeBuilder, lower_subproblem, solve
from rsvr.errors import DomainError
from rsvr.formulation import QuadOverLinear, check_feasibility

FAST = CccpSettings(max_iters=40)


@pytest.fixture(scope="module")
def small_runs():
    out = {}
    for case in ("pp", "ip", "up"):
        prob = make_problem(case, K=2, N=2, M=2, seed=3, eps=0.15)
        out[case] = (prob, *solve_cccp(prob, FAST))
    return out


def test_linearize_affine_is_exact():
    a = np.array([1.5, -2.0])
    g = (lambda x: float(a @ x) + 3.0, lambda x: a)
    mn = linearize(g, [0.3, 0.7])
    for x in ([0.0, 0.0], [5.0, -1.0]):
        assert mn(x) == pytest.approx(g[0](np.array(x)), abs=1e-12)


def test_linearize_square():
    mn = linearize((lambda x: float(x[0] ** 2), lambda x: 2 * x), 1.0)
    assert mn([0.0]) == -1.0 and mn([3.0]) == 5.0


@given(st.integers(0, 2**31))
def test_quad_over_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    M, J = 3, 2
    h = rng.standard_normal(M) + 1j * rng.standard_normal(M)
    g = QuadOverLinear(h, J, 0.05)
    w = rng.standard_normal((J, M)) + 1j * rng.standard_normal((J, M))
    x0 = g.pack(w, 0.5 + rng.exponential(2.0))
    fd = central_difference(g.value, x0)
    assert np.max(np.abs(fd - g.grad(x0))) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


@given(st.integers(0, 2**31))
def test_minorant_below_function(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    g = QuadOverLinear(h, 2, 0.1)
    pt = lambda: g.pack(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)),
                        0.2 + rng.exponential(1.0))
    x0 = pt()
    mn = linearize(g, x0)
    assert mn(x0) == pytest.approx(g.value(x0), rel=1e-12)
    for _ in range(5):
        x = pt()
        assert mn(x) <= g.value(x) + 1e-9 * max(1.0, abs(g.value(x)))


def test_linearize_domain_error():
    g = QuadOverLinear(np.ones(2, complex), 1, 0.1)
    with pytest.raises(DomainError):
        linearize(g, g.pack(np.ones((1, 2), complex), 0.0))


def test_toy_dc_program():
    # maximize x s.t. x^2 - (x + 2) <= 0, with the affine side "linearised"
    g = (lambda x: float(x[0] + 2.0), lambda x: np.array([1.0]))
    x0, history = np.array([0.0]), []
    for _ in range(5):
        mn = linearize(g, x0)
        b = ConeBuilder()
        x = b.var("x")
        ghat = Affine.linear([x], mn.grad[None, :], mn.value0 - mn.grad @ mn.x0)
        # x^2 <= ghat as ||(2x, ghat - 1)|| <= ghat + 1
        b.soc(ghat + 1.0, Affine.linear([x, x], np.array([[2.0, 0.0], [0.0, 1.0]]))
              + Affine.constant([0.0, mn.value0 - mn.grad @ mn.x0 - 1.0]))
        b.maximize(Affine.var([x]))
        sol = solve(b.build(), tol=1e-10)
        x0 = np.array([sol.x[x]])
        history.append(x0[0])
    assert history[0] == pytest.approx(2.0, abs=1e-7)
    assert np.ptp(history) <= 1e-7


@pytest.mark.parametrize("case", ["pp", "ip", "up"])
def test_initial_point_feasible(case):
    prob = make_problem(case, eps=0.2)
    v = initial_point(prob, 4)
    rep = check_feasibility(prob, v, tol=1e-9)
    assert rep.feasible, rep.residuals
    assert np.sum(np.abs(v.w) ** 2) == pytest.approx(prob.config.P / 2, rel=1e-12)
    if case == "ip":
        assert all(np.all(x == 0) for x in v.lam + v.tau)
    if case == "up":
        assert np.allclose(v.y, [t.min() for t in v.t])


def test_initial_point_seeds_differ():
    prob = make_problem("pp")
    a, b = initial_point(prob, 0), initial_point(prob, 1)
    assert not np.allclose(a.w, b.w)
    assert np.array_equal(a.w, initial_point(prob, 0).w)


def test_initial_point_tiny_power():
    prob = make_problem("pp", P=1e-12)
    v = initial_point(prob, 0)
    assert prob.metric(v.r) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("case", ["pp", "ip", "up"])
def test_trace_monotone_and_feasible(small_runs, case):
    prob, v, tr = small_runs[case]
    obj = tr.objectives
    assert np.all(np.diff(obj) >= -1e-8)
    assert max(r.max_residual for r in tr.records) <= 1e-6
    assert tr.status in ("converged", "stalled", "max_iters")
    assert check_feasibility(prob, v, 1e-6).feasible
    assert obj[-1] > obj[0]


@pytest.mark.parametrize("case", ["pp", "up"])
def test_stationarity_proxy(small_runs, case):
    prob, v, tr = small_runs[case]
    if tr.status != "converged":
        pytest.skip("run stopped before convergence")
    prog, _ = lower_subproblem(prob, v, minorants_at(prob, v), v.u)
    sol = solve(prog)
    obj = prob.equivalent_objective(v)
    assert abs(sol.objective - obj) <= 1e-4 * max(1.0, abs(obj))


def test_zero_power_trivial():
    prob = make_problem("pp", P=0.0)
    v, tr = solve_cccp(prob, FAST)
    assert tr.status == "trivial" and tr.final_objective == 0.0


def test_warm_start_from_sdma():
    prob = make_problem("pp", K=2, N=2, M=2, seed=3)
    base = sdma_opt("pp", prob.scene, prob.channel, prob.config, FAST)
    v, tr = solve_cccp(prob, FAST, init=base.plan)
    assert tr.final_objective >= base.objective - 1e-8


def test_multi_start_single_equals_plain():
    prob = make_problem("pp", K=2, N=2, M=2, seed=3)
    a = multi_start(prob, FAST)
    v, tr = solve_cccp(prob, FAST)
    assert a.objective == tr.final_objective
    assert np.array_equal(a.best.w, v.w)


def test_multi_start_best_and_deterministic(tmp_path):
    prob = make_problem("up", K=2, N=2, M=2, seed=3)
    s = CccpSettings(max_iters=40, restarts=5)
    res = multi_start(prob, s)
    assert len(res.traces) == 5
    assert all(res.objective >= o for o in res.objectives)
    again = multi_start(prob, s)
    assert again.objectives == res.objectives
    res.trace.to_csv(tmp_path / "a.csv")
    again.trace.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header.startswith("iter,objective")


def test_settings_validation():
    with pytest.raises(ValueError):
        CccpSettings(max_iters=0)
    with pytest.raises(ValueError):
        CccpSettings(restarts=0)
    with pytest.raises(ValueError):
        CccpSettings(objective_rel_tol=0.0)
    assert math.isclose(CccpSettings().objective_rel_tol, 1e-6)

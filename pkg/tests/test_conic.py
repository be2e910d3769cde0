import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_problem
from oracles import brute_quadratics, cvxpy_solve
from rsvr.cccp import initial_point, minorants_at
from rsvr.conic import (Affine, ClarabelBackend, ConeBuilder, lower_exponential, lower_log_utility,
                        lower_quad_over_linear, lower_subproblem, real_inner, solve)
from rsvr.formulation import check_feasibility


def _min_u_for_rate(e_val, B):
    b = ConeBuilder()
    e, u = b.var("e"), b.var("u")
    b.zero(Affine.var([e]) - e_val)
    lower_exponential(b, Affine.var([e]), Affine.var([u]), B)
    b.maximize(-Affine.var([u]))
    sol = solve(b.build())
    assert sol.ok
    return sol.x[u]


@pytest.mark.parametrize("e_over_B, expected", [(0.0, 1.0), (1.0, 2.0), (3.5, 2 ** 3.5)])
def test_exponential_lowering_examples(e_over_B, expected):
    B = 1e6
    # rate in physical units: the cone divides by B internally
    assert _min_u_for_rate(e_over_B * B, B) == pytest.approx(expected, rel=1e-7)


def test_exponential_with_normalised_u():
    b = ConeBuilder()
    u = b.var("u")
    lower_exponential(b, Affine.constant([3.0]), Affine.var([u]), 1.0, u_scale=4.0)
    b.maximize(-Affine.var([u]))
    sol = solve(b.build())
    assert 4.0 * sol.x[u] == pytest.approx(8.0, rel=1e-7)


def _min_t_quad(h, beams, sigma2, gain=1.0):
    M = h.size
    b = ConeBuilder()
    t = b.var("t")
    w = b.var("w", (len(beams), 2 * M))
    for j, wj in enumerate(beams):
        b.zero(Affine.var(w[j]) - np.concatenate([wj.real, wj.imag]))
    lower_quad_over_linear(b, h, list(w), Affine.var([t]), sigma2, gain)
    b.maximize(-Affine.var([t]))
    sol = solve(b.build(), tol=1e-10)
    assert sol.ok
    return sol.x[t]


def test_quad_lowering_zero_beam():
    h = np.array([1.0 + 1j, 0.5])
    assert _min_t_quad(h, [np.zeros(2, complex)], 0.25) == pytest.approx(0.25, abs=1e-8)


def test_quad_lowering_single_antenna():
    h = np.array([2.0 - 1j])
    w = np.array([0.5j])
    assert _min_t_quad(h, [w], 0.1) == pytest.approx(abs(np.conj(h[0]) * w[0]) ** 2 + 0.1,
                                                     abs=1e-8)


@given(st.integers(0, 2**31))
def test_quad_lowering_slack_is_exact(seed):
    # the SOC built for sum |h^H w|^2 + s <= t must be tight exactly at t = value
    rng = np.random.default_rng(seed)
    M, J = 3, rng.integers(1, 4)
    h = rng.standard_normal(M) + 1j * rng.standard_normal(M)
    beams = [rng.standard_normal(M) + 1j * rng.standard_normal(M) for _ in range(J)]
    ref = brute_quadratics(h, beams) + 0.3
    b = ConeBuilder()
    t = b.var("t")
    w = b.var("w", (J, 2 * M))
    lower_quad_over_linear(b, h, list(w), Affine.var([t]), 0.3)
    prog = b.build()
    x = np.zeros(prog.n)
    for j, wj in enumerate(beams):
        x[w[j]] = np.concatenate([wj.real, wj.imag])
    s = prog.slack(x)
    for tv, inside in ((ref, True), (ref * (1 + 1e-9) + 1e-9, True), (ref * (1 - 1e-6), False)):
        x[t] = tv
        s = prog.slack(x)
        margin = s[0] - np.linalg.norm(s[1:])
        assert (margin >= -1e-12 * max(1.0, ref)) == inside


@given(st.integers(0, 2**31))
def test_real_split_matches_complex_inner(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    w = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    z = real_inner(h) @ np.concatenate([w.real, w.imag])
    ref = np.vdot(h, w)
    assert abs(z[0] - ref.real) <= 1e-12 and abs(z[1] - ref.imag) <= 1e-12


def test_utility_cone_example():
    D_L, scale, c = 1.0, 0.6, 1000.0
    b = ConeBuilder()
    r = b.var("r")
    lower_log_utility(b, Affine.var([r]), Affine.constant([2.0]), scale, c, D_L)
    b.maximize(-Affine.var([r]))
    sol = solve(b.build())
    assert sol.x[r] == pytest.approx(D_L / c * math.exp(2.0 / scale), rel=1e-7)


def test_lp_and_exp_smoke():
    b = ConeBuilder()
    x = b.var("x", (2,))
    b.leq(Affine.var(x).sum(), 1.0)
    b.nonneg(Affine.var(x))
    b.maximize(Affine.linear(x, np.array([[1.0, 2.0]])))
    sol = solve(b.build())
    assert sol.objective == pytest.approx(2.0, abs=1e-7)
    # max log(y) s.t. y <= 3 via exp(t) <= y
    b = ConeBuilder()
    t, y = b.var("t"), b.var("y")
    b.leq(Affine.var([y]), 3.0)
    b.exp(Affine.var([t]), 1.0, Affine.var([y]))
    b.maximize(Affine.var([t]))
    assert solve(b.build()).objective == pytest.approx(math.log(3.0), abs=1e-7)


def test_infeasible_and_unbounded_reported():
    b = ConeBuilder()
    x = b.var("x")
    b.leq(Affine.var([x]), -1.0)
    b.nonneg(Affine.var([x]))
    b.maximize(Affine.var([x]))
    assert solve(b.build()).status == "infeasible"
    b = ConeBuilder()
    x = b.var("x")
    b.nonneg(Affine.var([x]))
    b.maximize(Affine.var([x]))
    assert solve(b.build()).status == "unbounded"


def _fixture_subproblem(case="pp"):
    prob = make_problem(case, K=2, N=2, M=2, seed=5)
    v = initial_point(prob, 0)
    prog, dec = lower_subproblem(prob, v, minorants_at(prob, v), v.u)
    return prob, v, prog, dec


def test_subproblem_cross_solver():
    _, _, prog, _ = _fixture_subproblem()
    sol = solve(prog)
    status, value, _ = cvxpy_solve(prog)
    assert sol.status == "optimal" and status == "optimal"
    assert sol.objective == pytest.approx(value, rel=1e-5)
    # frozen from the run above
    assert sol.objective == pytest.approx(2.5521512, rel=1e-6)


@pytest.mark.parametrize("case", ["pp", "ip", "up"])
def test_subproblem_solution_is_feasible_for_original(case):
    # the convexified constraints restrict the DC ones, so the decoded point
    # must pass the nonconvex feasibility check
    prob, v, prog, dec = _fixture_subproblem(case)
    sol = solve(prog)
    assert sol.ok
    x = dec(sol.x)
    rep = check_feasibility(prob, x, tol=1e-6)
    assert rep.feasible, rep.residuals
    assert sol.objective >= prob.equivalent_objective(v) - 1e-7


def test_cbf_dump(tmp_path):
    _, _, prog, _ = _fixture_subproblem()
    path = tmp_path / "sub.cbf"
    prog.to_cbf(path)
    text = path.read_text().split("\n")
    assert text[:2] == ["VER", "3"]
    con = text.index("CON")
    assert text[con + 1] == f"{prog.m} {len(prog.cones)}"
    assert sum("EXP" in line for line in text) == sum(k == "exp" for k, _ in prog.cones)
    acoord = text.index("ACOORD")
    assert int(text[acoord + 1]) == prog.G.nnz


def test_row_tags():
    b = ConeBuilder()
    x = b.var("x", (3,))
    b.nonneg(Affine.var(x))
    b.leq(Affine.var(x[:2]).sum(), 1.0, tag="cap")
    b.zero(Affine.var([x[2]]) - 0.5, tag="pin")
    prog = b.build()
    # zero rows come first
    assert prog.rows["pin"].tolist() == [0]
    assert prog.rows["cap"].tolist() == [4]


def test_backend_fallback_settings():
    _, _, prog, _ = _fixture_subproblem()
    assert ClarabelBackend(max_iter=1, fallbacks=()).solve(prog).status == "failure"
    sol = ClarabelBackend(max_iter=1, fallbacks=({"max_iter": 200},)).solve(prog)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(2.5521512, rel=1e-6)

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import lp_vertex_min
from rsvr.errors import DomainError
from rsvr.scene import ProbabilityModel
from rsvr.utility import LogUtility, q_metric, worst_case_distribution, worst_case_duals

D = 87.75e6
U = LogUtility(D)


def test_utility_values():
    assert U(D / 1000) == 0.0
    assert U(0.0) == 0.0
    top = float(mpmath.mpf("0.6") * mpmath.log(1000))
    assert U(D) == pytest.approx(top, rel=1e-15)
    assert U(D) == pytest.approx(4.1447, abs=1e-4)
    assert U(D / 2000) == 0.0                       # clamped below the zero crossing


def test_utility_domain():
    with pytest.raises(DomainError):
        U(-1.0)
    with pytest.raises(DomainError):
        U(1.01 * D)


@given(st.floats(0, D), st.floats(0, D))
def test_monotone(a, b):
    lo, hi = sorted((a, b))
    assert U(lo) <= U(hi)


@given(st.floats(D / 1000, D), st.floats(D / 1000, D))
def test_midpoint_concavity(a, b):
    assert U(0.5 * (a + b)) >= 0.5 * (U(a) + U(b)) - 1e-12


def test_worst_case_examples():
    np.testing.assert_allclose(worst_case_distribution([1, 2], [0, 0], [1, 1]), [1, 0])
    p = worst_case_distribution([3, 1, 2], [0.2] * 3, [0.5] * 3)
    np.testing.assert_allclose(p, [0.2, 0.5, 0.3])
    assert p @ [3, 1, 2] == pytest.approx(lp_vertex_min([3, 1, 2], [0.2] * 3, [0.5] * 3))
    p = worst_case_distribution([2, 2, 2], [0.1] * 3, [0.6] * 3)
    assert p @ [2, 2, 2] == pytest.approx(2.0)
    with pytest.raises(DomainError):
        worst_case_distribution([1, 2], [0.6, 0.6], [1, 1])


@st.composite
def box_instance(draw, max_n=6):
    n = draw(st.integers(1, max_n))
    u = np.array(draw(st.lists(st.floats(0, 5), min_size=n, max_size=n)))
    raw = np.array(draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n)))
    p_hat = raw / raw.sum()
    eps = draw(st.floats(0, 1))
    pm = ProbabilityModel.imperfect(p_hat, eps)
    return u, pm


@given(box_instance())
def test_greedy_matches_vertex_enumeration(inst):
    u, pm = inst
    p = worst_case_distribution(u, pm.lower, pm.upper)
    assert pm.contains(p, 1e-12)
    assert p @ u == pytest.approx(lp_vertex_min(u, pm.lower, pm.upper), abs=1e-9)


@given(box_instance())
def test_closed_form_duals(inst):
    u, pm = inst
    lam, tau, gamma = worst_case_duals(u, pm.lower, pm.upper)
    assert np.all(lam >= 0) and np.all(tau >= 0)
    assert np.all(u + lam - tau + gamma >= -1e-12)
    dual = tau @ pm.lower - lam @ pm.upper - gamma
    assert dual == pytest.approx(lp_vertex_min(u, pm.lower, pm.upper), abs=1e-9)


def test_metric_examples():
    pm = [ProbabilityModel.perfect([0.25, 0.75])]
    util = LogUtility(1.0, a=1.0, c=math.e ** 4)      # U(r) = ln(r) + 4 on [e^-4, 1]
    r = [np.array([math.exp(-2), 1.0])]               # utilities 2 and 4
    assert q_metric("pp", r, pm, util).value == pytest.approx(3.5)
    rho = 0.3 * D
    up = q_metric("up", [np.full(3, rho)] * 2, [ProbabilityModel.unknown(3)] * 2, U)
    assert up.value == pytest.approx(2 * U(rho))


def test_wide_boxes_reduce_to_worst_element():
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = [rng.uniform(0, D, 4)]
        p_hat = rng.dirichlet(np.ones(4))
        ip = q_metric("ip", r, [ProbabilityModel.imperfect(p_hat, 1.0)], U)
        up = q_metric("up", r, [ProbabilityModel.unknown(4)], U)
        assert ip.value == pytest.approx(up.value, abs=1e-12)
        assert ip.value == pytest.approx(lp_vertex_min(U(r[0]), np.zeros(4), np.ones(4)), abs=1e-12)


@given(st.integers(0, 2**31))
def test_pointwise_ordering(seed):
    rng = np.random.default_rng(seed)
    K = 3
    r = [rng.uniform(0, D, rng.integers(1, 6)) for _ in range(K)]
    p_hat = [rng.dirichlet(np.ones(x.size)) for x in r]
    eps = rng.uniform(0, 0.5)
    pp = q_metric("pp", r, [ProbabilityModel.perfect(p) for p in p_hat], U).value
    ip = q_metric("ip", r, [ProbabilityModel.imperfect(p, eps) for p in p_hat], U).value
    up = q_metric("up", r, [ProbabilityModel.unknown(x.size) for x in r], U).value
    assert pp >= ip - 1e-12 >= up - 2e-12


def test_eps_zero_equals_perfect_exactly():
    rng = np.random.default_rng(5)
    r = [rng.uniform(0, D, 5) for _ in range(2)]
    p = [rng.dirichlet(np.ones(5)) for _ in range(2)]
    pp = q_metric("pp", r, [ProbabilityModel.perfect(x) for x in p], U).value
    ip = q_metric("ip", r, [ProbabilityModel.imperfect(x, 0.0) for x in p], U).value
    assert ip == pp


def test_case_mismatch():
    with pytest.raises(DomainError):
        q_metric("pp", [np.ones(2)], [ProbabilityModel.unknown(2)], U)

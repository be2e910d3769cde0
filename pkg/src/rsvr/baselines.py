"""Comparison schemes: SDMA with optimised beams, SDMA with zero forcing, OFDMA with MRT.

None of them uses a common message.  The ZF and MRT schemes fix the beam
directions and solve the remaining rate/power allocation as one convex
program.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cccp import CccpSettings, multi_start
from .conic import LN2, Affine, ConeBuilder, decode_scene, scene_block, solve
from .errors import BaselineError
from .formulation import (DCProblem, DecisionVars, build_problem, complete_aux, make_feasible,
                          zero_vars)

SCHEMES = ("sdma_opt", "sdma_zf", "ofdma_mrt")


@dataclass
class BaselineResult:
    scheme: str
    case: str
    plan: DecisionVars
    objective: float
    problem: DCProblem
    info: dict = field(default_factory=dict)


def _problem(case, scene, channel, config, probs, eps):
    if probs is None:
        probs = scene.probability_models(case, eps)
    return build_problem(case, scene, probs, channel, config, common=False)


def sdma_opt(case, scene, channel, config, settings: CccpSettings | None = None,
             probs=None, eps=0.0) -> BaselineResult:
    """The rate-splitting CCCP pipeline with the common stream pinned to zero."""
    problem = _problem(case, scene, channel, config, probs, eps)
    res = multi_start(problem, settings)
    info = {"trace": res.trace, "traces": res.traces, "iterations": res.trace.iterations,
            "status": res.trace.status}
    return BaselineResult("sdma_opt", case, res.best, res.objective, problem, info)


def _silent(scheme, case, problem) -> BaselineResult:
    # nothing can be transmitted, and the rate floor is dropped with the budget
    plan = zero_vars(problem)
    return BaselineResult(scheme, case, plan, problem.metric(plan.r), problem,
                          {"status": "trivial", "iterations": 0})


def zf_directions(channel, n: int, rank_tol: float = 1e-10) -> np.ndarray:
    """Unit-norm ZF beam directions on subcarrier ``n``, shape (K, M)."""
    H = channel.subcarrier(n)                 # rows h_k^H
    K, M = H.shape
    if M < K:
        raise BaselineError(f"zero forcing needs M >= K (M={M}, K={K})")
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= rank_tol * sv[0]:
        raise BaselineError(f"channel matrix on subcarrier {n} is rank deficient")
    V = np.linalg.pinv(H)                     # M x K, H @ V = I
    V = V / np.linalg.norm(V, axis=0, keepdims=True)
    return V.T.copy()


def _fixed_direction_program(problem: DCProblem, a: np.ndarray, owner: np.ndarray):
    """Rate/power program for fixed beams with per-(beam, subcarrier) SNR gains.

    ``a[k, n] = P * |h_{k,n}^H v_{k,n}|^2 / sigma2`` is the single-user SNR per
    unit normalised power, ``owner[k, n]`` whether user ``k`` may use
    subcarrier ``n``.  Interference must already be zero.
    """
    cfg = problem.config
    K, N = problem.K, problem.N
    b = ConeBuilder()
    scene = scene_block(b, problem, cfg.B)
    q = b.var("q", (K, N))
    e = b.var("e", (K, N))
    pairs = [(k, n) for k in range(K) for n in range(N) if owner[k, n]]
    b.nonneg(Affine.var(q.ravel()))
    b.leq(Affine.var([q[k, n] for k, n in pairs]).sum(), 1.0, tag="power")
    for k in range(K):
        cols = [e[k, n] for n in range(N) if owner[k, n]]
        rhs = Affine.var(cols).sum() if cols else Affine.constant(0.0)
        b.leq(Affine.var([scene.d_p[k]]), rhs, tag=f"rate{k}")
    for k in range(K):
        unused = [q[k, n] for n in range(N) if not owner[k, n]]
        unused += [e[k, n] for n in range(N) if not owner[k, n]]
        if unused:
            b.zero(Affine.var(unused))
    for k, n in pairs:
        if a[k, n] <= 0:
            b.zero(Affine.var([q[k, n], e[k, n]]))
            continue
        b.nonneg(Affine.var([e[k, n]]))
        # 2^e <= 1 + a q, divided by a
        b.exp(Affine.var([e[k, n]], LN2) - math.log(a[k, n]), Affine.constant([1.0]),
              Affine.var([q[k, n]]) + 1.0 / a[k, n])
    return b.build(), scene, q, e


def _solve_fixed(problem, a, owner, directions):
    program, scene, q, e = _fixed_direction_program(problem, a, owner)
    sol = solve(program)
    if not sol.ok:
        raise BaselineError(f"fixed-beam power program failed: {sol.status} ({sol.raw_status})")
    return program, sol, scene, q


def _plan_from_powers(problem: DCProblem, sc: dict, qn: np.ndarray, directions: np.ndarray):
    """``qn`` normalised powers (K, N); ``directions`` unit vectors (K, N, M)."""
    K, N, M = problem.K, problem.N, problem.M
    w = np.zeros((K + 1, N, M), dtype=complex)
    w[1:] = np.sqrt(np.clip(qn, 0.0, None) * problem.config.P)[..., None] * directions
    v = DecisionVars(R=sc["R"], r=sc["r"], d_c=np.zeros(K), d_p=sc["d_p"], w=w,
                     lam=sc.get("lam"), tau=sc.get("tau"), gamma=sc.get("gamma"),
                     y=sc.get("y"), t=sc["t"])
    return make_feasible(problem, complete_aux(problem, v))


def sdma_zf(case, scene, channel, config, probs=None, eps=0.0) -> BaselineResult:
    """Zero-forcing directions per subcarrier with jointly optimised powers."""
    problem = _problem(case, scene, channel, config, probs, eps)
    if config.P == 0:
        return _silent("sdma_zf", case, problem)
    K, N = problem.K, problem.N
    directions = np.stack([zf_directions(channel, n) for n in range(N)], axis=1)   # K, N, M
    own = np.einsum("knm,knm->kn", channel.h.conj(), directions)
    a = config.P * np.abs(own) ** 2 / config.sigma2
    owner = np.ones((K, N), dtype=bool)
    program, sol, sidx, q = _solve_fixed(problem, a, owner, directions)
    sc = decode_scene(sidx, sol.x, config.B, K)
    plan = _plan_from_powers(problem, sc, sol.x[q], directions)
    info = {"status": sol.status, "iterations": sol.iterations,
            "interference": zf_interference(channel, plan.w)}
    return BaselineResult("sdma_zf", case, plan, problem.metric(plan.r), problem, info)


def zf_interference(channel, w) -> float:
    """Largest normalised cross-user leakage ``|h_k^H w_j|^2 / ||w_j||^2``, j != k."""
    K = channel.K
    worst = 0.0
    for n in range(channel.N):
        for j in range(K):
            wj = w[j + 1, n]
            pw = float(np.vdot(wj, wj).real)
            if pw == 0.0:
                continue
            for k in range(K):
                if k != j:
                    worst = max(worst, abs(np.vdot(channel.h[k, n], wj)) ** 2 / pw)
    return worst


def assign_subcarriers(channel) -> np.ndarray:
    """Owner of each subcarrier, (N,) user indices.

    Users pick their strongest free subcarrier in turn for ``N // K`` rounds,
    so every user holds at least that many.  The remaining subcarriers go to
    the user with the largest channel norm on them.
    """
    K, N = channel.K, channel.N
    norms = np.linalg.norm(channel.h, axis=2)      # K, N
    owner = -np.ones(N, dtype=int)
    for _ in range(N // K):
        for k in range(K):
            free = np.flatnonzero(owner < 0)
            owner[free[np.argmax(norms[k, free])]] = k
    for n in np.flatnonzero(owner < 0):
        owner[n] = int(np.argmax(norms[:, n]))
    return owner


def water_fill(prices: np.ndarray, inv_snr: np.ndarray, budget: float = 1.0,
               tol: float = 1e-12, max_iter: int = 500):
    """Solve ``q_n = (prices_n / (mu ln2) - inv_snr_n)^+`` with ``sum q = budget``.

    Bisection on the multiplier ``mu``; returns ``(q, mu)``.
    """
    prices = np.asarray(prices, dtype=float)
    inv_snr = np.asarray(inv_snr, dtype=float)
    live = prices > 0
    if not np.any(live):
        return np.zeros_like(inv_snr), 0.0

    def total(mu):
        return np.where(live, np.maximum(prices / (mu * LN2) - inv_snr, 0.0), 0.0).sum()

    hi = float(np.max(prices[live] / (LN2 * inv_snr[live])))     # nothing allocated
    lo = hi
    while total(lo) < budget:
        lo *= 0.5
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if total(mid) > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    mu = 0.5 * (lo + hi)
    q = np.where(live, np.maximum(prices / (mu * LN2) - inv_snr, 0.0), 0.0)
    return q * (budget / q.sum()), mu


def kkt_residual(q, prices, inv_snr, mu) -> float:
    """Relative stationarity residual of the weighted sum-log power problem."""
    q, prices, inv_snr = (np.asarray(x, dtype=float) for x in (q, prices, inv_snr))
    marginal = prices / (LN2 * (inv_snr + q))
    res = np.where(q > 0, np.abs(marginal - mu), np.maximum(marginal - mu, 0.0))
    return float(np.max(res) / mu) if mu > 0 else 0.0


def ofdma_mrt(case, scene, channel, config, probs=None, eps=0.0) -> BaselineResult:
    """One user per subcarrier, MRT beams, water-filling powers."""
    problem = _problem(case, scene, channel, config, probs, eps)
    if config.P == 0:
        return _silent("ofdma_mrt", case, problem)
    K, N = problem.K, problem.N
    owner_of = assign_subcarriers(channel)
    owner = np.zeros((K, N), dtype=bool)
    owner[owner_of, np.arange(N)] = True
    norms = np.linalg.norm(channel.h, axis=2)
    directions = channel.h / np.where(norms > 0, norms, 1.0)[..., None]
    a = config.P * norms**2 / config.sigma2

    program, sol, sidx, q = _solve_fixed(problem, a, owner, directions)
    sc = decode_scene(sidx, sol.x, config.B, K)
    # prices of the per-user rate constraints give the water levels
    nu = np.array([float(sol.z[program.rows[f"rate{k}"]][0]) for k in range(K)])
    a_own = a[owner_of, np.arange(N)]
    inv = np.where(a_own > 0, 1.0 / np.where(a_own > 0, a_own, 1.0), np.inf)
    prices = nu[owner_of]
    mu_conic = float(sol.z[program.rows["power"]][0])
    if mu_conic > 1e-9 and np.max(prices) > 0:
        qn, mu = water_fill(prices, inv)
        kkt = kkt_residual(qn, prices, inv, mu)
    else:
        # rates saturated; power is not the binding resource
        qn, mu, kkt = sol.x[q][owner_of, np.arange(N)], 0.0, 0.0
    qk = np.zeros((K, N))
    qk[owner_of, np.arange(N)] = qn
    plan = _plan_from_powers(problem, sc, qk, directions)
    info = {"status": sol.status, "owner": owner_of, "mu": mu, "mu_conic": mu_conic, "prices": nu,
            "kkt_residual": kkt, "power_sum": float(qn.sum()), "conic_q": sol.x[q]}
    return BaselineResult("ofdma_mrt", case, plan, problem.metric(plan.r), problem, info)


def run_baseline(scheme: str, case, scene, channel, config, settings=None, probs=None, eps=0.0):
    if scheme == "sdma_opt":
        return sdma_opt(case, scene, channel, config, settings, probs, eps)
    if scheme == "sdma_zf":
        return sdma_zf(case, scene, channel, config, probs, eps)
    if scheme == "ofdma_mrt":
        return ofdma_mrt(case, scene, channel, config, probs, eps)
    raise ValueError(f"unknown scheme {scheme!r}")


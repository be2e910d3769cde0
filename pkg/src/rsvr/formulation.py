"""Rate-splitting streaming problems: variables, DC structure and certificates.

Beam index 0 is the common stream; beam ``k + 1`` is user ``k``'s private
stream (users are 0-based internally).  All rates are in bits/s and all
powers in watts.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .channel import ChannelState, SystemConfig, gains
from .errors import ConstructionError
from .scene import CASES, ProbabilityModel, SceneModel
from .utility import LogUtility, q_metric, worst_case_duals

COMMON = 0


@dataclass
class DecisionVars:
    R: list[np.ndarray]
    r: list[np.ndarray]
    d_c: np.ndarray
    d_p: np.ndarray
    w: np.ndarray                       # complex (K + 1, N, M)
    e: np.ndarray | None = None         # (K + 1, N)
    u: np.ndarray | None = None         # (K + 1, N)
    lam: list[np.ndarray] | None = None
    tau: list[np.ndarray] | None = None
    gamma: np.ndarray | None = None
    y: np.ndarray | None = None
    t: list[np.ndarray] | None = None   # utility hypograph values per FoV

    def copy(self) -> "DecisionVars":
        return copy.deepcopy(self)

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.w) ** 2))


@dataclass(frozen=True)
class DCTerm:
    """``f - g <= 0`` with ``f = sum_{f_beams} |h^H w|^2 + sigma2`` and
    ``g = (sum_{g_beams} |h^H w|^2 + sigma2) / u[u_beam, n]``."""

    kind: str
    k: int
    n: int
    f_beams: tuple[int, ...]
    g_beams: tuple[int, ...]
    u_beam: int


class ConstraintFamily(NamedTuple):
    name: str
    label: str
    count: int
    members: tuple = ()


class QuadOverLinear:
    """``g(w, u) = (sum_j |h^H w_j|^2 + sigma2) / u`` on a flat real vector.

    The flat layout is ``[Re w_1, Im w_1, ..., Re w_J, Im w_J, u]``.
    """

    def __init__(self, h: np.ndarray, n_beams: int, sigma2: float):
        self.h = np.asarray(h, dtype=complex)
        self.M = self.h.size
        self.J = n_beams
        self.sigma2 = float(sigma2)

    def pack(self, w: np.ndarray, u: float) -> np.ndarray:
        w = np.asarray(w).reshape(self.J, self.M)
        return np.concatenate([np.concatenate([b.real, b.imag]) for b in w] + [[u]])

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        wr = x[:-1].reshape(self.J, 2 * self.M)
        w = wr[:, :self.M] + 1j * wr[:, self.M:]
        return w, x[-1]

    def quad(self, w) -> float:
        inner = w @ self.h.conj()
        return float(np.sum(inner.real**2 + inner.imag**2))

    def value(self, x) -> float:
        w, u = self._split(x)
        return (self.quad(w) + self.sigma2) / u

    def grad(self, x) -> np.ndarray:
        w, u = self._split(x)
        if u <= 0:
            raise ValueError("quad-over-linear gradient needs u > 0")
        inner = w @ self.h.conj()                    # h^H w_j
        gw = 2.0 * inner[:, None] * self.h[None, :]  # 2 h h^H w_j
        gw = np.concatenate([gw.real, gw.imag], axis=1).ravel() / u
        gu = -(self.quad(w) + self.sigma2) / u**2
        return np.concatenate([gw, [gu]])


@dataclass(frozen=True)
class DCProblem:
    case: str
    scene: SceneModel
    probs: tuple[ProbabilityModel, ...]
    channel: ChannelState
    config: SystemConfig
    utility: LogUtility
    common: bool = True
    rate_floor: bool = True
    families: tuple[ConstraintFamily, ...] = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def N(self) -> int:
        return self.config.N

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def geometry(self):
        return self.scene.geometry

    @property
    def D_L(self) -> float:
        return self.scene.ladder.top

    @property
    def delta(self) -> float:
        return self.scene.ladder.delta

    def family(self, name: str) -> ConstraintFamily:
        for f in self.families:
            if f.name == name:
                return f
        raise KeyError(name)

    def counts(self) -> dict[str, int]:
        return {f.name: f.count for f in self.families}

    def dc_terms(self) -> list[DCTerm]:
        out = []
        for name in ("dc_common", "dc_private"):
            if any(f.name == name for f in self.families):
                out += list(self.family(name).members)
        return out

    def variable_counts(self) -> dict[str, int]:
        n_fov = sum(g.n_fovs for g in self.geometry)
        beams = self.K + 1 if self.common else self.K
        out = {
            "R": sum(g.n_tiles for g in self.geometry),
            "r": n_fov,
            "d": 2 * self.K if self.common else self.K,
            "w": beams * self.N * self.M,
            "e": beams * self.N,
            "u": beams * self.N,
        }
        if self.case == "ip":
            out.update(lam=n_fov, tau=n_fov, gamma=self.K)
        elif self.case == "up":
            out.update(y=self.K)
        return out

    # -- objectives -------------------------------------------------------
    def metric(self, r: Sequence[np.ndarray]) -> float:
        """Problem-1 objective ``Q^(case)(r)``."""
        return q_metric(self.case, r, self.probs, self.utility).value

    def equivalent_objective(self, v: DecisionVars) -> float:
        """Objective of the case's equivalent DC problem at ``v``."""
        if self.case == "pp":
            return self.metric(v.r)
        if self.case == "ip":
            return float(sum(tau @ pm.lower - lam @ pm.upper - g
                             for lam, tau, g, pm in zip(v.lam, v.tau, v.gamma, self.probs)))
        return float(np.sum(v.y))


def build_problem(case: str, scene: SceneModel, prob_models: Sequence[ProbabilityModel],
                  channel: ChannelState, config: SystemConfig,
                  utility: LogUtility | None = None, common: bool = True,
                  rate_floor: bool = True) -> DCProblem:
    """Assemble the equivalent DC problem of ``case``.

    ``common=False`` pins the common stream to zero (the SDMA restriction).
    ``rate_floor`` adds ``r >= D_L / c`` so the log utility stays in its
    nonnegative branch inside the solver.
    """
    if case not in CASES:
        raise ConstructionError(f"unknown case {case!r}")
    K, N, M = config.K, config.N, config.M
    if scene.K != K or len(prob_models) != K:
        raise ConstructionError(f"scene has {scene.K} users, config {K}, models {len(prob_models)}")
    if channel.h.shape != (K, N, M):
        raise ConstructionError(f"channel shape {channel.h.shape} != {(K, N, M)}")
    for pm, g in zip(prob_models, scene.geometry):
        if pm.case != case:
            raise ConstructionError(f"probability model {pm.case!r} given for case {case!r}")
        if pm.size != g.n_fovs:
            raise ConstructionError("probability model does not match the FoV set")
    if utility is None:
        utility = LogUtility(scene.ladder.top)

    geo = scene.geometry
    n_fov = sum(g.n_fovs for g in geo)
    privates = tuple(range(1, K + 1))
    fam = [
        ConstraintFamily("smoothness", "r <= R <= r + delta", int(sum(g.cover.sum() for g in geo))),
        ConstraintFamily("rate_split", "sum R = d_c + d_p", K),
        ConstraintFamily("power", "sum ||w||^2 <= P", 1),
        ConstraintFamily("tile_box", "0 <= R <= D_L", int(sum(g.n_tiles for g in geo))),
        ConstraintFamily("fov_box", "r <= D_L", n_fov),
    ]
    if common:
        fam.append(ConstraintFamily("common_sum", "sum d_c <= sum e_c", 1))
    fam.append(ConstraintFamily("private_sum", "d_p <= sum e_p", K))
    if common:
        members = tuple(DCTerm("dc_common", k, n, privates, (COMMON,) + privates, COMMON)
                        for k in range(K) for n in range(N))
        fam.append(ConstraintFamily("dc_common", "common SINR", len(members), members))
    members = tuple(DCTerm("dc_private", k, n, tuple(j for j in privates if j != k + 1),
                           privates, k + 1)
                    for k in range(K) for n in range(N))
    fam.append(ConstraintFamily("dc_private", "private SINR", len(members), members))
    beams = ((COMMON,) if common else ()) + privates
    fam.append(ConstraintFamily("exp_rate", "2^(e/B) <= u", len(beams) * N,
                                tuple((j, n) for j in beams for n in range(N))))
    if case == "ip":
        fam.append(ConstraintFamily("dual_feasibility", "P3", n_fov))
    elif case == "up":
        fam.append(ConstraintFamily("hypograph", "P4", n_fov))
    if rate_floor:
        fam.append(ConstraintFamily("rate_floor", "floor", n_fov))
    return DCProblem(case, scene, tuple(prob_models), channel, config, utility, common,
                     rate_floor, tuple(fam))


# ---------------------------------------------------------------------------
# physical-layer evaluation


def sinrs(channel: ChannelState, w: np.ndarray, sigma2: float) -> tuple[np.ndarray, np.ndarray]:
    """Common-message and private SINRs, each of shape (K, N)."""
    G = gains(channel, w)                      # (K, K + 1, N)
    K = G.shape[0]
    priv = G[:, 1:, :]
    total_priv = priv.sum(axis=1)
    own = priv[np.arange(K), np.arange(K), :]
    common = G[:, COMMON, :] / (total_priv + sigma2)
    private = own / (total_priv - own + sigma2)
    return common, private


def rate_capacities(channel, w, config: SystemConfig):
    """Right-hand sides of the common (per user) and private rate constraints."""
    sc, spv = sinrs(channel, w, config.sigma2)
    common = config.B * np.log2(1.0 + sc).sum(axis=1)
    private = config.B * np.log2(1.0 + spv).sum(axis=1)
    return common, private


def tight_aux(problem: DCProblem, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``u`` and ``e`` compatible with beamformers ``w``."""
    sc, spv = sinrs(problem.channel, w, problem.config.sigma2)
    u = np.ones((problem.K + 1, problem.N))
    if problem.common:
        u[COMMON] = 1.0 + sc.min(axis=0)
    u[1:] = 1.0 + spv
    e = problem.config.B * np.log2(u)
    return u, e


def apply_max_rule(scene: SceneModel, r: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Tile rates ``R[t] = max`` of ``r_i`` over the FoVs covering tile ``t``."""
    out = []
    for g, r_k in zip(scene.geometry, r):
        r_k = np.asarray(r_k, dtype=float)
        out.append(np.where(g.cover, r_k[:, None], -np.inf).max(axis=0))
    return out


def smoothness_residuals(scene: SceneModel, R, r) -> tuple[np.ndarray, np.ndarray]:
    """Signed residuals of ``r_i <= R_t`` and ``R_t <= r_i + delta`` over covered pairs."""
    lo, hi = [], []
    for g, R_k, r_k in zip(scene.geometry, R, r):
        ii, tt = np.nonzero(g.cover)
        lo.append(np.asarray(r_k)[ii] - np.asarray(R_k)[tt])
        hi.append(np.asarray(R_k)[tt] - np.asarray(r_k)[ii] - scene.ladder.delta)
    return np.concatenate(lo), np.concatenate(hi)


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class FeasibilityReport:
    residuals: dict          # family -> signed residuals (<= 0 satisfied)
    relative: dict           # family -> worst relative violation (>= 0)
    max_violation: float
    feasible: bool
    tol: float

    def violated(self) -> list[str]:
        return [k for k, v in self.relative.items() if v > self.tol]


def check_feasibility(problem: DCProblem, v: DecisionVars, tol: float = 1e-6) -> FeasibilityReport:
    """Evaluate the original (relaxed) Problem-1 constraints at ``v``.

    Rate constraints are recomputed from the beamformers; auxiliary variables
    are ignored.  Relative violations are scaled by ``D_L`` for rate families
    (or the larger side of the inequality) and by ``P`` for power.
    """
    cfg, D_L = problem.config, problem.D_L
    res: dict[str, np.ndarray] = {}
    scale: dict[str, np.ndarray | float] = {}

    lo, hi = smoothness_residuals(problem.scene, v.R, v.r)
    res["smooth_lower"], res["smooth_upper"] = lo, hi
    scale["smooth_lower"] = scale["smooth_upper"] = D_L
    Rcat = np.concatenate([np.asarray(x) for x in v.R])
    rcat = np.concatenate([np.asarray(x) for x in v.r])
    res["tile_box"] = np.concatenate([-Rcat, Rcat - D_L])
    res["fov_box"] = np.concatenate([-rcat, rcat - D_L])
    scale["tile_box"] = scale["fov_box"] = D_L

    load = np.array([np.sum(x) for x in v.R])
    res["rate_split"] = np.abs(load - v.d_c - v.d_p)
    scale["rate_split"] = np.maximum(D_L, load)
    res["msg_nonneg"] = np.concatenate([-v.d_c, -v.d_p])
    scale["msg_nonneg"] = D_L

    power = v.power
    res["power"] = np.array([power - cfg.P])
    scale["power"] = max(cfg.P, 1e-300)

    cap_c, cap_p = rate_capacities(problem.channel, v.w, cfg)
    res["common_rate"] = np.sum(v.d_c) - cap_c
    scale["common_rate"] = np.maximum(D_L, cap_c)
    res["private_rate"] = v.d_p - cap_p
    scale["private_rate"] = np.maximum(D_L, cap_p)
    if not problem.common:
        res["common_pinned"] = np.concatenate([np.abs(v.d_c) / D_L,
                                               [np.sum(np.abs(v.w[COMMON]) ** 2) / max(cfg.P, 1e-300)]])
        scale["common_pinned"] = 1.0

    relative = {k: float(np.max(np.maximum(r / scale[k], 0.0), initial=0.0)) for k, r in res.items()}
    worst = max(relative.values())
    return FeasibilityReport(res, relative, worst, worst <= tol, tol)


def recover_solution(case: str, v: DecisionVars):
    """Drop the auxiliary variables: ``(R, r, (d_c, d_p), w)``."""
    if case not in CASES:
        raise ConstructionError(f"unknown case {case!r}")
    return ([np.asarray(x).copy() for x in v.R], [np.asarray(x).copy() for x in v.r],
            (v.d_c.copy(), v.d_p.copy()), v.w.copy())


def complete_aux(problem: DCProblem, v: DecisionVars, overwrite: bool = False) -> DecisionVars:
    """Fill ``e, u`` (tight) and the case variables with their best values for ``r``."""
    v = v.copy()
    u = problem.utility
    v.u, v.e = tight_aux(problem, v.w)
    util = [np.atleast_1d(u(np.asarray(x))) for x in v.r]
    v.t = [x.copy() for x in util]
    if problem.case == "ip" and (overwrite or v.lam is None):
        duals = [worst_case_duals(uv, pm.lower, pm.upper) for uv, pm in zip(util, problem.probs)]
        v.lam = [d[0] for d in duals]
        v.tau = [d[1] for d in duals]
        v.gamma = np.array([d[2] for d in duals])
    if problem.case == "up" and (overwrite or v.y is None):
        v.y = np.array([x.min() for x in util])
    return v


def make_feasible(problem: DCProblem, v: DecisionVars) -> DecisionVars:
    """Project a slightly infeasible solver point onto the streaming constraints.

    Power is scaled into budget, ``u, e`` are reset to the SINR-tight values,
    message rates are clipped to the recomputed capacities, and per-user tile
    and FoV rates are scaled down together when the messages cannot carry
    them (scaling keeps both smoothness inequalities).  Case variables are
    adjusted only as far as needed to stay feasible for the equivalent
    problem, so that their objective still reflects the solver's values.
    """
    cfg, D_L, delta = problem.config, problem.D_L, problem.delta
    v = v.copy()
    if not problem.common:
        v.w[COMMON] = 0.0
        v.d_c = np.zeros(problem.K)
    power = v.power
    if power > cfg.P:
        v.w *= math.sqrt(cfg.P / power) if power > 0 else 0.0
    v.u, v.e = tight_aux(problem, v.w)
    cap_c = float(v.e[COMMON].sum()) if problem.common else 0.0
    cap_p = v.e[1:].sum(axis=1)

    v.d_c = np.clip(v.d_c, 0.0, None)
    if v.d_c.sum() > cap_c:
        v.d_c = v.d_c * (cap_c / v.d_c.sum()) if v.d_c.sum() > 0 else v.d_c
    v.d_p = np.clip(v.d_p, 0.0, cap_p)

    newR, newr = [], []
    for k, g in enumerate(problem.geometry):
        r = np.clip(np.asarray(v.r[k], dtype=float), 0.0, D_L)
        # pairwise |r_i - r_j| <= delta on overlapping FoVs, lowering the larger
        for _ in range(g.n_fovs):
            hi_t = np.where(g.cover, r[:, None], np.inf).min(axis=0) + delta
            cap = np.where(g.cover, hi_t[None, :], np.inf).min(axis=1)
            if np.all(r <= cap):
                break
            r = np.minimum(r, cap)
        lo_t = np.where(g.cover, r[:, None], -np.inf).max(axis=0)
        hi_t = np.where(g.cover, r[:, None], np.inf).min(axis=0) + delta
        R = np.clip(np.asarray(v.R[k], dtype=float), lo_t, np.minimum(hi_t, D_L))
        budget = v.d_c[k] + v.d_p[k]
        load = R.sum()
        if load > budget:
            f = budget / load if load > 0 else 0.0
            R, r = R * f, r * f
        else:
            excess = budget - load
            cut = min(excess, v.d_p[k])
            v.d_p[k] -= cut
            v.d_c[k] -= excess - cut
        newR.append(R)
        newr.append(r)
    v.R, v.r = newR, newr

    util = [np.atleast_1d(problem.utility(x)) for x in v.r]
    v.t = [x.copy() for x in util]
    if problem.case == "ip":
        if v.lam is None:
            return complete_aux(problem, v)
        v.lam = [np.maximum(x, 0.0) for x in v.lam]
        v.tau = [np.maximum(x, 0.0) for x in v.tau]
        v.gamma = np.array([max(g, float(np.max(tau - lam - uv)))
                            for g, lam, tau, uv in zip(v.gamma, v.lam, v.tau, util)])
    elif problem.case == "up":
        if v.y is None:
            return complete_aux(problem, v)
        v.y = np.array([min(max(y, 0.0), uv.min()) for y, uv in zip(v.y, util)])
    return v


def zero_vars(problem: DCProblem) -> DecisionVars:
    """The all-zero plan (feasible for every power budget)."""
    K, N, M = problem.K, problem.N, problem.M
    geo = problem.geometry
    v = DecisionVars(
        R=[np.zeros(g.n_tiles) for g in geo], r=[np.zeros(g.n_fovs) for g in geo],
        d_c=np.zeros(K), d_p=np.zeros(K), w=np.zeros((K + 1, N, M), dtype=complex),
    )
    return complete_aux(problem, v)


def rebalance_messages(v: DecisionVars) -> DecisionVars:
    """Restore ``sum R = d_c + d_p`` by lowering ``d_p`` first, then ``d_c``.

    A (tiny) deficit is absorbed by raising ``d_p``.
    """
    v = v.copy()
    for k, R in enumerate(v.R):
        excess = v.d_c[k] + v.d_p[k] - float(np.sum(R))
        if excess >= 0:
            cut = min(excess, v.d_p[k])
            v.d_p[k] -= cut
            v.d_c[k] = max(v.d_c[k] - (excess - cut), 0.0)
        else:
            v.d_p[k] -= excess
    return v


def uniform_min_rates(problem: DCProblem, v: DecisionVars) -> DecisionVars:
    """Set every FoV of a user to that user's smallest FoV rate.

    The worst-case (``up``) metric only sees the minimum, so this leaves it
    unchanged while tile rates, and hence message rates, can only drop.
    """
    v = v.copy()
    v.r = [np.full_like(np.asarray(x, dtype=float), float(np.min(x))) for x in v.r]
    v.R = apply_max_rule(problem.scene, v.r)
    return complete_aux(problem, rebalance_messages(v), overwrite=True)


# ---------------------------------------------------------------------------
# JSON round-trip for debugging and regression fixtures

_LIST_FIELDS = ("R", "r", "lam", "tau", "t")
_ARRAY_FIELDS = ("d_c", "d_p", "e", "u", "gamma", "y")


def vars_to_dict(v: DecisionVars) -> dict:
    out = {"w_re": v.w.real.tolist(), "w_im": v.w.imag.tolist()}
    for name in _LIST_FIELDS:
        val = getattr(v, name)
        out[name] = None if val is None else [np.asarray(x).tolist() for x in val]
    for name in _ARRAY_FIELDS:
        val = getattr(v, name)
        out[name] = None if val is None else np.asarray(val).tolist()
    return out


def vars_from_dict(d: dict) -> DecisionVars:
    kw = {"w": np.asarray(d["w_re"]) + 1j * np.asarray(d["w_im"])}
    for name in _LIST_FIELDS:
        kw[name] = None if d.get(name) is None else [np.asarray(x, dtype=float) for x in d[name]]
    for name in _ARRAY_FIELDS:
        kw[name] = None if d.get(name) is None else np.asarray(d[name], dtype=float)
    return DecisionVars(**kw)


def problem_summary(problem: DCProblem) -> dict:
    """Structure of ``problem`` (sizes and constraint families), JSON-ready."""
    return {
        "case": problem.case, "common": problem.common, "rate_floor": problem.rate_floor,
        "K": problem.K, "N": problem.N, "M": problem.M,
        "B": problem.config.B, "P": problem.config.P, "sigma2": problem.config.sigma2,
        "D_L": problem.D_L, "delta": problem.delta,
        "fovs": [list(u.fov_indices) for u in problem.scene.users],
        "families": [{"name": f.name, "label": f.label, "count": f.count} for f in problem.families],
        "variables": problem.variable_counts(),
    }

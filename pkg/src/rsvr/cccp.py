"""Concave-convex procedure for the rate-splitting DC problems."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .conic import ClarabelBackend, lower_subproblem, solve
from .errors import DomainError, SolverError
from .formulation import (COMMON, DCProblem, DecisionVars, QuadOverLinear, check_feasibility,
                          complete_aux, make_feasible, tight_aux, zero_vars)


@dataclass(frozen=True)
class CccpSettings:
    max_iters: int = 100
    objective_rel_tol: float = 1e-6
    patience: int = 2
    restarts: int = 1
    seed: int = 0
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    feas_tol: float = 1e-6
    init_power_fraction: float = 0.5
    init_capacity_fraction: float = 0.9

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 1 or self.patience < 1:
            raise ValueError("max_iters, restarts and patience must be >= 1")
        if not (self.objective_rel_tol > 0 and self.tol_feas > 0 and self.tol_gap > 0):
            raise ValueError("tolerances must be positive")

    def backend(self) -> ClarabelBackend:
        return ClarabelBackend(self.tol_feas, self.tol_gap, self.tol_gap)


@dataclass(frozen=True)
class IterRecord:
    iter: int
    objective: float
    equivalent: float
    max_residual: float
    step_norm: float
    backend_status: str


@dataclass
class CccpTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    run: int = 0
    seed: int | None = None
    wall_time: float = 0.0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective if self.records else math.nan

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "objective", "equivalent", "max_residual", "step_norm",
                         "backend_status"])
            for r in self.records:
                wr.writerow([r.iter, repr(r.objective), repr(r.equivalent), repr(r.max_residual),
                             repr(r.step_norm), r.backend_status])


@dataclass(frozen=True)
class AffineMinorant:
    value0: float
    grad: np.ndarray
    x0: np.ndarray

    def __call__(self, x) -> float:
        return float(self.value0 + self.grad @ (np.asarray(x, dtype=float) - self.x0))


def linearize(g, x0) -> AffineMinorant:
    """First-order expansion of convex ``g`` at ``x0`` (a global minorant).

    ``g`` exposes ``value(x)`` and ``grad(x)``, or is a pair of callables.
    """
    value, grad = (g.value, g.grad) if hasattr(g, "value") else g
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if isinstance(g, QuadOverLinear) and x0[-1] <= 0:
        raise DomainError("quad-over-linear term linearised at u <= 0")
    return AffineMinorant(float(value(x0)), np.atleast_1d(np.asarray(grad(x0), dtype=float)), x0)


def g_functions(problem: DCProblem) -> list[QuadOverLinear]:
    return [QuadOverLinear(problem.channel.h[t.k, t.n], len(t.g_beams), problem.config.sigma2)
            for t in problem.dc_terms()]


def minorants_at(problem: DCProblem, point: DecisionVars) -> list[AffineMinorant]:
    out = []
    for term, g in zip(problem.dc_terms(), g_functions(problem)):
        x0 = g.pack(point.w[list(term.g_beams), term.n], point.u[term.u_beam, term.n])
        out.append(linearize(g, x0))
    return out


def _flat(problem: DCProblem, v: DecisionVars) -> np.ndarray:
    """Scaled vector used for step norms (rates / B, beams / sqrt(P))."""
    B, P = problem.config.B, problem.config.P
    parts = [np.concatenate(v.R) / B, np.concatenate(v.r) / B, v.d_c / B, v.d_p / B,
             v.w.real.ravel() / math.sqrt(P), v.w.imag.ravel() / math.sqrt(P)]
    return np.concatenate(parts)


def initial_point(problem: DCProblem, seed: int, settings: CccpSettings | None = None) -> DecisionVars:
    """Strictly feasible start from random beamformers at a fraction of the budget."""
    settings = settings or CccpSettings()
    cfg = problem.config
    K, N, M = problem.K, problem.N, problem.M
    rng = np.random.Generator(np.random.Philox(seed))
    beams = list(range(K + 1)) if problem.common else list(range(1, K + 1))
    w = np.zeros((K + 1, N, M), dtype=complex)
    g = rng.standard_normal((len(beams), N, M)) + 1j * rng.standard_normal((len(beams), N, M))
    g /= np.linalg.norm(g, axis=2, keepdims=True)
    w[beams] = g * math.sqrt(settings.init_power_fraction * cfg.P / (len(beams) * N))

    u, e = tight_aux(problem, w)
    theta = settings.init_capacity_fraction
    cap_c = e[COMMON].sum() if problem.common else 0.0
    d_c = np.full(K, theta * cap_c / K)
    d_p = theta * e[1:].sum(axis=1)
    R, r = [], []
    for k, geo in enumerate(problem.geometry):
        budget = d_c[k] + d_p[k]
        rho = min(budget / geo.n_tiles, problem.D_L)
        f = rho * geo.n_tiles / budget if budget > 0 else 0.0
        d_c[k] *= f
        d_p[k] *= f
        R.append(np.full(geo.n_tiles, rho))
        r.append(np.full(geo.n_fovs, rho))
    v = DecisionVars(R=R, r=r, d_c=d_c, d_p=d_p, w=w, e=e, u=u)
    v = complete_aux(problem, v)
    if problem.case == "ip":
        v.lam = [np.zeros_like(x) for x in v.r]
        v.tau = [np.zeros_like(x) for x in v.r]
        v.gamma = np.array([-float(np.min(t)) for t in v.t])
    return v


def meets_floor(problem: DCProblem, v: DecisionVars) -> bool:
    if not problem.rate_floor:
        return True
    floor = problem.utility.r_floor
    return all(np.all(x >= floor * (1 - 1e-9)) for x in v.r)


def solve_cccp(problem: DCProblem, settings: CccpSettings | None = None,
               init: DecisionVars | None = None, seed: int | None = None):
    """Run CCCP from ``init`` (or a seeded random start).

    Each iterate is projected back onto the streaming constraints and accepted only when the
    case metric does not decrease, which keeps the trace monotone even when
    the backend returns slightly infeasible points.
    Returns ``(DecisionVars, CccpTrace)``.
    """
    settings = settings or CccpSettings()
    seed = settings.seed if seed is None else seed
    trace = CccpTrace(seed=seed)
    start = time.perf_counter()
    if problem.config.P == 0:
        v = zero_vars(problem)
        trace.records.append(IterRecord(0, problem.metric(v.r), problem.equivalent_objective(v),
                                        check_feasibility(problem, v).max_violation, 0.0, "trivial"))
        trace.status = "trivial"
        return v, trace

    if init is None:
        cur = initial_point(problem, seed, settings)
    else:
        cur = make_feasible(problem, complete_aux(problem, init, overwrite=init.lam is None))
    if not meets_floor(problem, cur):
        raise SolverError("start point cannot meet the rate floor", status="infeasible_start")
    rep = check_feasibility(problem, cur, settings.feas_tol)
    obj = problem.metric(cur.r)
    trace.records.append(IterRecord(0, obj, problem.equivalent_objective(cur), rep.max_violation,
                                    0.0, "init"))
    backend = settings.backend()
    calm = 0
    trace.status = "max_iters"
    for it in range(1, settings.max_iters + 1):
        program, decode = lower_subproblem(problem, cur, minorants_at(problem, cur), cur.u)
        sol = solve(program, backend=backend)
        if not sol.ok:
            if it == 1:
                raise SolverError(f"first convex subproblem failed: {sol.raw_status}", status=sol.status)
            trace.status = f"degraded:{sol.status}"
            break
        nxt = make_feasible(problem, decode(sol.x))
        new_obj = problem.metric(nxt.r)
        if new_obj < obj:
            # numerical noise at a stationary point; keep the previous iterate
            trace.status = "converged" if obj - new_obj <= settings.objective_rel_tol * max(1.0, abs(obj)) else "stalled"
            break
        rep = check_feasibility(problem, nxt, settings.feas_tol)
        step = float(np.linalg.norm(_flat(problem, nxt) - _flat(problem, cur)))
        trace.records.append(IterRecord(it, new_obj, problem.equivalent_objective(nxt),
                                        rep.max_violation, step, sol.status))
        change = abs(new_obj - obj) / max(1.0, abs(obj))
        cur, obj = nxt, new_obj
        calm = calm + 1 if change < settings.objective_rel_tol else 0
        if calm >= settings.patience:
            trace.status = "converged"
            break
    trace.wall_time = time.perf_counter() - start
    return cur, trace


@dataclass
class MultiStartResult:
    best: DecisionVars
    trace: CccpTrace
    traces: list
    objectives: list
    errors: list

    @property
    def objective(self) -> float:
        return self.trace.final_objective


def multi_start(problem: DCProblem, settings: CccpSettings | None = None, warm_starts=()):
    """Best of ``settings.restarts`` random starts plus any warm starts.

    Random run ``i`` uses seed ``settings.seed + i``; warm starts follow in the
    order given.  Ties go to the lowest run index.
    """
    settings = settings or CccpSettings()
    starts = [("seed", settings.seed + i) for i in range(settings.restarts)]
    starts += [("warm", v) for v in warm_starts]
    results, errors = [], []
    for run, (kind, arg) in enumerate(starts):
        try:
            if kind == "seed":
                v, tr = solve_cccp(problem, settings, seed=arg)
            else:
                v, tr = solve_cccp(problem, settings, init=arg, seed=None)
                tr.seed = None
        except SolverError as exc:
            errors.append((run, exc))
            continue
        tr.run = run
        results.append((run, v, tr))
    if not results:
        msgs = "; ".join(f"run {r}: {e}" for r, e in errors)
        raise SolverError(f"all {len(starts)} CCCP runs failed ({msgs})", status="all_failed")
    best = max(results, key=lambda x: (x[2].final_objective, -x[0]))
    return MultiStartResult(best[1], best[2], [r[2] for r in results],
                            [r[2].final_objective for r in results], errors)

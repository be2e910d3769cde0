"""Cone-program IR, the Clarabel backend adapter, and lowering primitives.

A :class:`ConeProgram` is ``maximize c @ x`` subject to ``G x + g`` lying in a
product of zero, nonnegative, second-order and exponential cones.  Programs
are assembled with :class:`ConeBuilder` from :class:`Affine` row blocks.

Exponential cone convention: ``(x, y, z)`` with ``y * exp(x / y) <= z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

LN2 = math.log(2.0)

CONE_KINDS = ("zero", "nonneg", "soc", "exp")


class Affine:
    """A block of ``m`` affine rows over a growing variable vector.

    Stored as COO triplets so that the total number of variables need not be
    known until the program is built.
    """

    __slots__ = ("m", "rows", "cols", "vals", "const")

    def __init__(self, m, rows=None, cols=None, vals=None, const=None):
        self.m = int(m)
        self.rows = np.zeros(0, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
        self.cols = np.zeros(0, dtype=np.int64) if cols is None else np.asarray(cols, dtype=np.int64)
        self.vals = np.zeros(0) if vals is None else np.asarray(vals, dtype=float)
        self.const = np.zeros(self.m) if const is None else np.broadcast_to(
            np.asarray(const, dtype=float), (self.m,)).copy()

    # -- constructors -----------------------------------------------------
    @classmethod
    def var(cls, idx, scale=1.0) -> "Affine":
        idx = np.asarray(idx, dtype=np.int64).ravel()
        vals = np.broadcast_to(np.asarray(scale, dtype=float), idx.shape)
        return cls(idx.size, np.arange(idx.size), idx, vals)

    @classmethod
    def constant(cls, values) -> "Affine":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(values.size, const=values)

    @classmethod
    def linear(cls, idx, coef, const=0.0) -> "Affine":
        """Rows ``coef @ x[idx] + const`` for a dense ``coef`` (m x len(idx))."""
        idx = np.asarray(idx, dtype=np.int64).ravel()
        coef = np.atleast_2d(np.asarray(coef, dtype=float))
        m = coef.shape[0]
        rr, cc = np.nonzero(coef)
        return cls(m, rr, idx[cc], coef[rr, cc], const)

    # -- algebra ----------------------------------------------------------
    def _coerce(self, other) -> "Affine":
        if isinstance(other, Affine):
            return other
        return Affine(self.m, const=other)

    def __add__(self, other):
        other = self._coerce(other)
        if other.m != self.m:
            if other.m == 1 and not other.rows.size:
                other = Affine(self.m, const=other.const[0])
            elif self.m == 1 and not self.rows.size:
                return Affine(other.m, const=self.const[0]) + other
            else:
                raise ValueError(f"row mismatch {self.m} vs {other.m}")
        return Affine(self.m, np.concatenate([self.rows, other.rows]),
                      np.concatenate([self.cols, other.cols]),
                      np.concatenate([self.vals, other.vals]), self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine(self.m, self.rows, self.cols, -self.vals, -self.const)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim == 0:
            return Affine(self.m, self.rows, self.cols, self.vals * s, self.const * s)
        s = np.broadcast_to(s, (self.m,))
        return Affine(self.m, self.rows, self.cols, self.vals * s[self.rows], self.const * s)

    __rmul__ = __mul__

    def sum(self, weights=None) -> "Affine":
        w = np.ones(self.m) if weights is None else np.asarray(weights, dtype=float)
        return Affine(1, np.zeros_like(self.rows), self.cols, self.vals * w[self.rows],
                      np.array([self.const @ w]))

    def __getitem__(self, key) -> "Affine":
        sel = np.arange(self.m)[key]
        sel = np.atleast_1d(sel)
        remap = -np.ones(self.m, dtype=np.int64)
        remap[sel] = np.arange(sel.size)
        if np.unique(sel).size == sel.size:
            keep = remap[self.rows] >= 0
            return Affine(sel.size, remap[self.rows[keep]], self.cols[keep], self.vals[keep],
                          self.const[sel])
        return stack([self[int(i)] for i in sel])

    def evaluate(self, x) -> np.ndarray:
        out = self.const.copy()
        np.add.at(out, self.rows, self.vals * np.asarray(x)[self.cols])
        return out

    def __repr__(self):
        return f"Affine(m={self.m}, nnz={self.vals.size})"


def stack(blocks) -> Affine:
    blocks = list(blocks)
    if not blocks:
        return Affine(0)
    off = np.cumsum([0] + [b.m for b in blocks])
    return Affine(int(off[-1]),
                  np.concatenate([b.rows + o for b, o in zip(blocks, off)]),
                  np.concatenate([b.cols for b in blocks]),
                  np.concatenate([b.vals for b in blocks]),
                  np.concatenate([b.const for b in blocks]))


@dataclass(frozen=True)
class ConeProgram:
    """``maximize c @ x`` s.t. ``G @ x + g`` in ``cones`` (in row order)."""

    c: np.ndarray
    G: sp.csc_matrix
    g: np.ndarray
    cones: tuple[tuple[str, int], ...]
    names: dict = field(default_factory=dict, compare=False)
    objective_offset: float = 0.0
    rows: dict = field(default_factory=dict, compare=False)   # tag -> row indices

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.g.size

    def slack(self, x) -> np.ndarray:
        return self.G @ x + self.g

    def cone_residual(self, x) -> float:
        """Largest violation of any cone membership at ``x``."""
        s = self.slack(x)
        worst, pos = 0.0, 0
        for kind, dim in self.cones:
            blk = s[pos:pos + dim]
            pos += dim
            if kind == "zero":
                worst = max(worst, float(np.abs(blk).max(initial=0.0)))
            elif kind == "nonneg":
                worst = max(worst, float(max(0.0, -blk.min(initial=0.0))))
            elif kind == "soc":
                worst = max(worst, float(max(0.0, np.linalg.norm(blk[1:]) - blk[0])))
            elif kind == "exp":
                a, b, c = blk
                if b > 0:
                    viol = b * math.exp(min(a / b, 700.0)) - c
                    worst = max(worst, viol / max(1.0, abs(c)))
                else:
                    worst = max(worst, max(0.0, -b), max(0.0, a), max(0.0, -c))
        return worst

    def to_cbf(self, path) -> None:
        """Write the program in Conic Benchmark Format (version 3)."""
        kind_map = {"zero": "L=", "nonneg": "L+", "soc": "Q", "exp": "EXP"}
        # CBF orders the exponential cone as (z, y, x) relative to ours
        perm = np.arange(self.m)
        pos = 0
        for kind, dim in self.cones:
            if kind == "exp":
                perm[pos:pos + 3] = [pos + 2, pos + 1, pos]
            pos += dim
        G = self.G.tocsr()[perm].tocoo()
        g = self.g[perm]
        lines = ["VER", "3", "", "OBJSENSE", "MAX", "", "VAR", f"{self.n} 1", f"F {self.n}", ""]
        lines += ["CON", f"{self.m} {len(self.cones)}"]
        lines += [f"{kind_map[k]} {d}" for k, d in self.cones]
        nz = np.flatnonzero(self.c)
        lines += ["", "OBJACOORD", str(nz.size)] + [f"{j} {self.c[j]!r}" for j in nz]
        if self.objective_offset:
            lines += ["", "OBJBCOORD", repr(self.objective_offset)]
        lines += ["", "ACOORD", str(G.nnz)] + [f"{i} {j} {v!r}" for i, j, v in zip(G.row, G.col, G.data)]
        nzb = np.flatnonzero(g)
        lines += ["", "BCOORD", str(nzb.size)] + [f"{i} {g[i]!r}" for i in nzb]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


class ConeBuilder:
    def __init__(self):
        self.n = 0
        self.names: dict[str, np.ndarray] = {}
        self._blocks: dict[str, list[Affine]] = {k: [] for k in CONE_KINDS}
        self._soc_dims: list[int] = []
        self._tags: dict[str, list] = {k: [] for k in CONE_KINDS}
        self._objective = Affine(1)

    def var(self, name: str, shape=()) -> np.ndarray:
        size = int(np.prod(shape)) if shape != () else 1
        idx = np.arange(self.n, self.n + size).reshape(shape) if shape != () else np.array(self.n)
        self.n += size
        if name in self.names:
            raise ValueError(f"variable {name!r} declared twice")
        self.names[name] = idx
        return idx

    def _add(self, kind, expr, tag):
        if tag is not None:
            start = sum(b.m for b in self._blocks[kind])
            self._tags[kind].append((tag, start, expr.m))
        self._blocks[kind].append(expr)

    def zero(self, expr: Affine, tag: str | None = None):
        self._add("zero", expr, tag)

    def nonneg(self, expr: Affine, tag: str | None = None):
        self._add("nonneg", expr, tag)

    def leq(self, lhs, rhs, tag: str | None = None):
        """``lhs <= rhs`` row-wise."""
        if not isinstance(lhs, Affine):
            lhs = Affine.constant(lhs)
        self.nonneg(-(lhs - rhs), tag)

    def soc(self, t: Affine, x: Affine):
        """``||x||_2 <= t`` with scalar ``t``."""
        if t.m != 1:
            raise ValueError("SOC bound must be a single row")
        self._blocks["soc"].append(stack([t, x]))
        self._soc_dims.append(1 + x.m)

    def rsoc(self, a: Affine, b: Affine, z: Affine):
        """``||z||^2 <= 2 a b`` with ``a, b >= 0``, as an ordinary SOC."""
        self.soc(a + b, stack([z * math.sqrt(2.0), a - b]))

    def exp(self, x: Affine, y: Affine, z: Affine):
        """Row-wise ``y exp(x / y) <= z``; all three blocks have equal height."""
        m = x.m
        if isinstance(y, (int, float)):
            y = Affine.constant(np.full(m, float(y)))
        if not (y.m == z.m == m):
            raise ValueError("exp-cone arguments must have equal height")
        for i in range(m):
            self._blocks["exp"].append(stack([x[i], y[i], z[i]]))

    def maximize(self, expr: Affine):
        self._objective = self._objective + expr

    def objective_value(self, x) -> float:
        return float(self._objective.evaluate(x)[0])

    def build(self) -> ConeProgram:
        blocks, cones, rows = [], [], {}
        offset = 0
        for kind in CONE_KINDS:
            bl = self._blocks[kind]
            if not bl:
                continue
            for tag, start, m in self._tags[kind]:
                rows.setdefault(tag, []).append(np.arange(offset + start, offset + start + m))
            offset += sum(b.m for b in bl)
            if kind == "soc":
                blocks += bl
                cones += [("soc", d) for d in self._soc_dims]
            elif kind == "exp":
                blocks += bl
                cones += [("exp", 3)] * len(bl)
            else:
                blk = stack(bl)
                blocks.append(blk)
                cones.append((kind, blk.m))
        allb = stack(blocks)
        G = sp.csc_matrix((allb.vals, (allb.rows, allb.cols)), shape=(allb.m, self.n))
        G.sum_duplicates()
        c = np.zeros(self.n)
        np.add.at(c, self._objective.cols, self._objective.vals)
        rows = {t: np.concatenate(v) for t, v in rows.items()}
        return ConeProgram(c, G, allb.const.copy(), tuple(cones), dict(self.names),
                           float(self._objective.const[0]), rows)


# ---------------------------------------------------------------------------
# backend


@dataclass(frozen=True)
class ConeSolution:
    status: str            # optimal | almost_optimal | infeasible | unbounded | failure
    x: np.ndarray | None
    objective: float | None
    z: np.ndarray | None = None
    iterations: int = 0
    residual: float = math.nan
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "almost_optimal")


class ClarabelBackend:
    """Interior-point backend; supports every cone kind of the IR."""

    name = "clarabel"

    # settings tried in turn after a numerical failure; badly scaled DC rows
    # at warm starts sometimes confuse the default equilibration
    FALLBACKS = ({"equilibrate_enable": False}, {"max_step_fraction": 0.9})

    def __init__(self, tol_feas=1e-8, tol_gap_abs=1e-8, tol_gap_rel=1e-8, max_iter=200,
                 accept_almost=True, fallbacks=FALLBACKS):
        self.tol_feas = tol_feas
        self.tol_gap_abs = tol_gap_abs
        self.tol_gap_rel = tol_gap_rel
        self.max_iter = max_iter
        self.accept_almost = accept_almost
        self.fallbacks = tuple(fallbacks)

    def _cones(self, cones):
        import clarabel

        out = []
        for kind, dim in cones:
            if kind == "zero":
                out.append(clarabel.ZeroConeT(dim))
            elif kind == "nonneg":
                out.append(clarabel.NonnegativeConeT(dim))
            elif kind == "soc":
                out.append(clarabel.SecondOrderConeT(dim))
            elif kind == "exp":
                out.append(clarabel.ExponentialConeT())
            else:
                raise ValueError(kind)
        return out

    def solve(self, program: ConeProgram) -> ConeSolution:
        sol = self._solve_once(program, {})
        for extra in self.fallbacks:
            if sol.status != "failure":
                break
            sol = self._solve_once(program, extra)
        return sol

    def _solve_once(self, program: ConeProgram, extra: dict) -> ConeSolution:
        import clarabel

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_feas = self.tol_feas
        settings.tol_gap_abs = self.tol_gap_abs
        settings.tol_gap_rel = self.tol_gap_rel
        settings.max_iter = self.max_iter
        for key, val in extra.items():
            setattr(settings, key, val)
        n = program.n
        P = sp.csc_matrix((n, n))
        A = (-program.G).tocsc()
        try:
            solver = clarabel.DefaultSolver(P, -program.c, A, program.g,
                                            self._cones(program.cones), settings)
            res = solver.solve()
        except Exception as exc:  # backend raised instead of reporting
            return ConeSolution("failure", None, None, raw_status=repr(exc))
        raw = str(res.status)
        if raw.endswith("AlmostSolved") and self.accept_almost:
            status = "almost_optimal"
        elif raw.endswith("Solved") and "Almost" not in raw:
            status = "optimal"
        elif "PrimalInfeasible" in raw:
            status = "infeasible"
        elif "DualInfeasible" in raw:
            status = "unbounded"
        else:
            status = "failure"
        x = np.asarray(res.x) if status in ("optimal", "almost_optimal") else None
        obj = None if x is None else float(program.c @ x + program.objective_offset)
        resid = math.nan if x is None else program.cone_residual(x)
        return ConeSolution(status, x, obj, np.asarray(res.z) if x is not None else None,
                            int(res.iterations), resid, raw)


_DEFAULT_BACKEND = ClarabelBackend()


def solve(program: ConeProgram, tol: float | None = None, backend=None) -> ConeSolution:
    """Solve ``program`` with ``backend`` (Clarabel by default).

    The returned status is the backend's verdict; callers decide whether a
    non-optimal status is fatal.
    """
    if backend is None:
        backend = _DEFAULT_BACKEND if tol is None else ClarabelBackend(tol, tol, tol)
    return backend.solve(program)


# ---------------------------------------------------------------------------
# lowering primitives


def lower_exponential(builder: ConeBuilder, e: Affine, u: Affine, B: float = 1.0,
                      u_scale=1.0):
    """``2^(e / B) <= u_scale * u`` row-wise, as exponential cones.

    ``u_scale`` lets ``u`` be a normalised variable; the cone is written as
    ``exp(ln2 * e / B - ln(u_scale)) <= u`` which is exact.
    """
    shift = np.log(np.broadcast_to(np.asarray(u_scale, dtype=float), (e.m,)))
    builder.exp(e * (LN2 / B) - shift, Affine.constant(np.ones(e.m)), u)


def real_inner(h: np.ndarray) -> np.ndarray:
    """2 x 2M matrix mapping real-stacked ``[Re w; Im w]`` to ``[Re; Im](h^H w)``."""
    hr, hi = h.real, h.imag
    return np.vstack([np.concatenate([hr, hi]), np.concatenate([-hi, hr])])


def lower_quad_over_linear(builder: ConeBuilder, h: np.ndarray, beams, t: Affine,
                           sigma2: float, gain: float = 1.0):
    """``gain * sum_j |h^H w_j|^2 + sigma2 <= t`` as one second-order cone.

    ``beams`` holds the real-stacked index arrays (length 2M) of each ``w_j``.
    With ``z`` the stacked real/imaginary inner products and ``s = t - sigma2``,
    ``||z||^2 <= s`` is written as ``||(2z, s - 1)|| <= s + 1``.
    """
    T = real_inner(h) * math.sqrt(gain)
    z = stack([Affine.linear(b, T) for b in beams]) if beams else Affine(0)
    s = t - sigma2
    builder.soc(s + 1.0, stack([z * 2.0, s - 1.0]))


def lower_log_utility(builder: ConeBuilder, r: Affine, t: Affine, scale: float, c: float,
                      D_L: float):
    """``t <= scale * ln(c * r / D_L)`` row-wise via ``exp(t / scale) <= c r / D_L``."""
    builder.exp(t * (1.0 / scale), Affine.constant(np.ones(t.m)), r * (c / D_L))


# ---------------------------------------------------------------------------
# lowering of the streaming subproblems
#
# Inside the cone programs every rate is measured in units of the subcarrier
# bandwidth B, beamformers are divided by sqrt(P) and each u is divided by its
# value at the linearisation point.  Decoders undo the scaling.


@dataclass
class SceneIndex:
    """Variable indices of the shared rate/utility block."""

    R: list
    r: list
    t: list
    d_c: np.ndarray | None
    d_p: np.ndarray
    lam: list | None = None
    tau: list | None = None
    gamma: np.ndarray | None = None
    y: np.ndarray | None = None


def scene_block(builder: ConeBuilder, problem, rate_unit: float) -> SceneIndex:
    """Rates, smoothness, rate split, boxes, utility cones and the case objective.

    Couplings between the message rates and the physical layer are left to
    the caller.
    """
    geo = problem.geometry
    K = problem.K
    D = problem.D_L / rate_unit
    delta = problem.delta / rate_unit
    util = problem.utility
    R = [builder.var(f"R{k}", (g.n_tiles,)) for k, g in enumerate(geo)]
    r = [builder.var(f"r{k}", (g.n_fovs,)) for k, g in enumerate(geo)]
    t = [builder.var(f"t{k}", (g.n_fovs,)) for k, g in enumerate(geo)]
    d_c = builder.var("d_c", (K,)) if problem.common else None
    d_p = builder.var("d_p", (K,))
    idx = SceneIndex(R, r, t, d_c, d_p)

    for k, g in enumerate(geo):
        ii, tt = np.nonzero(g.cover)
        Rv, rv = Affine.var(R[k][tt]), Affine.var(r[k][ii])
        builder.leq(rv, Rv)
        builder.leq(Rv, rv + delta)
        load = Affine.var(R[k]).sum()
        split = Affine.var([d_p[k]])
        if d_c is not None:
            split = split + Affine.var([d_c[k]])
        builder.zero(load - split)
        builder.nonneg(Affine.var(R[k]))
        builder.leq(Affine.var(R[k]), D)
        builder.leq(Affine.var(r[k]), D)
        if problem.rate_floor:
            builder.leq(util.r_floor / rate_unit, Affine.var(r[k]))
        else:
            builder.nonneg(Affine.var(r[k]))
        lower_log_utility(builder, Affine.var(r[k]), Affine.var(t[k]), util.scale, util.c, D)
    builder.nonneg(Affine.var(d_p))
    if d_c is not None:
        builder.nonneg(Affine.var(d_c))

    if problem.case == "pp":
        for k, pm in enumerate(problem.probs):
            builder.maximize(Affine.var(t[k]).sum(pm.p))
    elif problem.case == "ip":
        idx.lam = [builder.var(f"lam{k}", (g.n_fovs,)) for k, g in enumerate(geo)]
        idx.tau = [builder.var(f"tau{k}", (g.n_fovs,)) for k, g in enumerate(geo)]
        idx.gamma = builder.var("gamma", (K,))
        for k, pm in enumerate(problem.probs):
            lam, tau = Affine.var(idx.lam[k]), Affine.var(idx.tau[k])
            gam = Affine.var(np.full(pm.size, idx.gamma[k]))
            builder.nonneg(lam)
            builder.nonneg(tau)
            builder.nonneg(Affine.var(t[k]) + lam - tau + gam)
            builder.maximize(tau.sum(pm.lower) - lam.sum(pm.upper) - Affine.var([idx.gamma[k]]))
    else:
        idx.y = builder.var("y", (K,))
        builder.nonneg(Affine.var(idx.y))
        for k, g in enumerate(geo):
            builder.leq(Affine.var(np.full(g.n_fovs, idx.y[k])), Affine.var(t[k]))
        builder.maximize(Affine.var(idx.y).sum())
    return idx


def decode_scene(idx: SceneIndex, x: np.ndarray, rate_unit: float, K: int) -> dict:
    out = {
        "R": [x[i] * rate_unit for i in idx.R],
        "r": [x[i] * rate_unit for i in idx.r],
        "t": [x[i].copy() for i in idx.t],
        "d_c": x[idx.d_c] * rate_unit if idx.d_c is not None else np.zeros(K),
        "d_p": x[idx.d_p] * rate_unit,
    }
    if idx.lam is not None:
        out.update(lam=[x[i].copy() for i in idx.lam], tau=[x[i].copy() for i in idx.tau],
                   gamma=x[idx.gamma].copy())
    if idx.y is not None:
        out["y"] = x[idx.y].copy()
    return out


def beam_block(builder: ConeBuilder, n_beams: int, N: int, M: int) -> np.ndarray:
    """Normalised real-stacked beamformers (J, N, 2M) under ``sum ||w||^2 <= 1``."""
    w = builder.var("w", (n_beams, N, 2 * M))
    builder.soc(Affine.constant([1.0]), Affine.var(w.ravel()))
    return w


def lower_subproblem(problem, point, minorants, u_scale=None):
    """Convexified DC subproblem at ``point`` as a :class:`ConeProgram`.

    ``minorants[i]`` is the affine minorant of the ``g`` side of
    ``problem.dc_terms()[i]`` on the flat layout of
    :class:`~rsvr.formulation.QuadOverLinear` (physical units).  Each DC row
    is divided by ``g`` at the linearisation point before lowering.
    Returns ``(program, decode)`` where ``decode(x)`` yields a
    :class:`~rsvr.formulation.DecisionVars`.
    """
    from .formulation import COMMON, DecisionVars

    cfg = problem.config
    K, N, M = problem.K, problem.N, problem.M
    B, P, s2 = cfg.B, cfg.P, cfg.sigma2
    sqP = math.sqrt(P)
    us = np.ones((K + 1, N)) if u_scale is None else np.maximum(np.asarray(u_scale, float), 1.0)

    b = ConeBuilder()
    scene = scene_block(b, problem, B)
    w = beam_block(b, K + 1, N, M)
    e = b.var("e", (K + 1, N))
    u = b.var("u", (K + 1, N))
    if not problem.common:
        b.zero(Affine.var(w[COMMON].ravel()))
        b.zero(Affine.var(e[COMMON]))
        b.zero(Affine.var(u[COMMON]) - 1.0 / us[COMMON])
    else:
        b.leq(Affine.var(scene.d_c).sum(), Affine.var(e[COMMON]).sum())
    for k in range(K):
        b.leq(Affine.var([scene.d_p[k]]), Affine.var(e[k + 1]).sum())
    active = range(K + 1) if problem.common else range(1, K + 1)
    for j in active:
        b.nonneg(Affine.var(e[j]))
        b.leq(Affine.constant(1.0 / us[j]), Affine.var(u[j]))
        lower_exponential(b, Affine.var(e[j]), Affine.var(u[j]), 1.0, us[j])

    terms = problem.dc_terms()
    if len(terms) != len(minorants):
        raise ValueError("one minorant per DC term required")
    for term, mn in zip(terms, minorants):
        n = term.n
        s = float(mn.value0)
        if not s > 0:
            raise ValueError("DC normalisation needs g > 0 at the linearisation point")
        grad = np.asarray(mn.grad, dtype=float)
        a_w = grad[:-1].reshape(len(term.g_beams), 2 * M)
        a_u = grad[-1]
        idx = np.concatenate([w[j, n] for j in term.g_beams] + [[u[term.u_beam, n]]])
        coef = np.concatenate([(a_w * sqP).ravel(), [a_u * us[term.u_beam, n]]]) / s
        const = (mn.value0 - grad @ mn.x0) / s
        ghat = Affine.linear(idx, coef[None, :], const)
        h = problem.channel.h[term.k, n]
        lower_quad_over_linear(b, h, [w[j, n] for j in term.f_beams], ghat, s2 / s, P / s)

    program = b.build()

    def decode(x):
        sc = decode_scene(scene, x, B, K)
        wr = x[w]
        wc = sqP * (wr[..., :M] + 1j * wr[..., M:])
        return DecisionVars(R=sc["R"], r=sc["r"], d_c=sc["d_c"], d_p=sc["d_p"], w=wc,
                            e=x[e] * B, u=x[u] * us, lam=sc.get("lam"), tau=sc.get("tau"),
                            gamma=sc.get("gamma"), y=sc.get("y"), t=sc["t"])

    return program, decode

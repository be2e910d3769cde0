"""Experiment configuration, sweeps, result tables and plot data."""
from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .baselines import run_baseline
from .cccp import CccpSettings, multi_start
from .channel import SystemConfig, dbm_to_watt, sample_channels
from .errors import BaselineError, ConstructionError, SolverError
from .formulation import build_problem
from .quantize import discretize
from .scene import (CASES, DEFAULT_DELTA_FRACTION, RateLadder, SceneModel, TilingGrid,
                    UserPrediction, estimate_probabilities, load_traces,
                    scene_from_predictions, standard_ladder, fixture_grid, fixture_users)
from .utility import LogUtility, q_metric

SCHEME_NAMES = ("proposed", "sdma-opt", "sdma-zf", "ofdma-mrt")
AXES = ("M", "L", "eps", "P")


@dataclass(frozen=True)
class ExperimentConfig:
    # scene
    grid: tuple[int, int] | None = None        # None: the 8 x 8 prediction fixture
    fov: tuple[int, int] = (3, 3)
    K: int = 2
    traces: str | None = None                  # CSV of viewpoint traces
    trace_position: int = 2
    trace_users: tuple | None = None
    normalize: bool = True
    L: int = 3
    ladder: tuple[float, ...] | None = None    # custom rates in Mbit/s
    scale_ladder: float = 1.0
    delta_fraction: float = DEFAULT_DELTA_FRACTION
    # radio
    M: int = 4
    N: int = 4
    B: float = 1e6
    P: float = 1.0                              # watts
    sigma2: float = 1e-9
    pathloss: tuple[float, ...] | None = None
    # experiment
    cases: tuple[str, ...] = CASES
    schemes: tuple[str, ...] = SCHEME_NAMES
    eps: float = 0.1
    sweep_axis: str | None = None
    sweep_values: tuple = ()
    realizations: int = 1
    seed: int = 0
    # solver
    max_iters: int = 100
    rel_tol: float = 1e-6
    restarts: int = 1
    warm_start: bool = True

    def __post_init__(self):
        bad = [c for c in self.cases if c not in CASES]
        if bad:
            raise ConstructionError(f"unknown cases {bad}")
        bad = [s for s in self.schemes if s not in SCHEME_NAMES]
        if bad:
            raise ConstructionError(f"unknown schemes {bad}")
        if self.sweep_axis is not None and self.sweep_axis not in AXES:
            raise ConstructionError(f"sweep axis must be one of {AXES}")
        for name in ("K", "M", "N", "realizations", "restarts", "max_iters"):
            if getattr(self, name) < 1:
                raise ConstructionError(f"{name} must be positive")
        if self.B <= 0 or self.sigma2 <= 0 or self.P < 0 or self.scale_ladder <= 0:
            raise ConstructionError("B, sigma2 and scale_ladder must be positive, P nonnegative")
        if not 0 <= self.eps <= 1:
            raise ConstructionError("eps must lie in [0, 1]")
        if self.traces is not None and not Path(self.traces).exists():
            raise ConstructionError(f"trace file {self.traces} not found")

    def settings(self) -> CccpSettings:
        return CccpSettings(max_iters=self.max_iters, objective_rel_tol=self.rel_tol,
                            restarts=self.restarts, seed=self.seed)

    def points(self) -> list:
        if self.sweep_axis is None:
            return [None]
        return list(self.sweep_values)

    def at(self, value) -> "ExperimentConfig":
        if self.sweep_axis is None or value is None:
            return self
        cast = {"M": int, "L": int, "eps": float, "P": float}[self.sweep_axis]
        return replace(self, **{self.sweep_axis: cast(value)})


def _parse_power(radio: dict) -> float:
    if "P_dbm" in radio:
        return dbm_to_watt(float(radio["P_dbm"]))
    return float(radio.get("P", 1.0))


def config_from_dict(d: dict) -> ExperimentConfig:
    """Nested mapping (``scene``, ``radio``, ``experiment``, ``solver``) to a config."""
    d = d or {}
    known = {"scene", "radio", "experiment", "solver"}
    extra = set(d) - known
    if extra:
        raise ConstructionError(f"unknown config sections {sorted(extra)}")
    sc, ra = d.get("scene", {}) or {}, d.get("radio", {}) or {}
    ex, so = d.get("experiment", {}) or {}, d.get("solver", {}) or {}
    kw = {}
    if "grid" in sc:
        kw["grid"] = tuple(sc["grid"])
    for key in ("K", "traces", "trace_position", "normalize", "L", "scale_ladder", "delta_fraction"):
        if key in sc:
            kw[key] = sc[key]
    if "fov" in sc:
        kw["fov"] = tuple(sc["fov"])
    if "trace_users" in sc:
        kw["trace_users"] = tuple(sc["trace_users"])
    if "ladder" in sc:
        if isinstance(sc["ladder"], (list, tuple)):
            kw["ladder"] = tuple(float(x) for x in sc["ladder"])
        else:
            kw["L"] = int(sc["ladder"])
    for key in ("M", "N"):
        if key in ra:
            kw[key] = int(ra[key])
    for key in ("B", "sigma2"):
        if key in ra:
            kw[key] = float(ra[key])
    kw["P"] = _parse_power(ra)
    if ra.get("pathloss") is not None:
        kw["pathloss"] = tuple(float(x) for x in ra["pathloss"])
    for key in ("cases", "schemes"):
        if key in ex:
            val = ex[key]
            kw[key] = tuple([val] if isinstance(val, str) else val)
    for key, cast in (("eps", float), ("realizations", int), ("seed", int)):
        if key in ex:
            kw[key] = cast(ex[key])
    if "sweep" in ex and ex["sweep"]:
        kw["sweep_axis"] = ex["sweep"]["axis"]
        vals = ex["sweep"]["values"]
        if kw["sweep_axis"] == "P" and ex["sweep"].get("unit", "W") == "dBm":
            vals = [dbm_to_watt(float(v)) for v in vals]
        kw["sweep_values"] = tuple(vals)
    for key, cast in (("max_iters", int), ("rel_tol", float), ("restarts", int), ("warm_start", bool)):
        if key in so:
            kw[key] = cast(so[key])
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh))


# ---------------------------------------------------------------------------
# instance construction


def make_ladder(cfg: ExperimentConfig) -> RateLadder:
    if cfg.ladder is not None:
        levels = tuple(1e6 * x / cfg.scale_ladder for x in cfg.ladder)
        return RateLadder(levels, cfg.delta_fraction * levels[-1])
    lad = standard_ladder(cfg.L, scale=cfg.scale_ladder)
    return RateLadder(lad.levels, cfg.delta_fraction * lad.top)


def make_scene(cfg: ExperimentConfig) -> SceneModel:
    ladder = make_ladder(cfg)
    if cfg.traces is None:
        grid = fixture_grid()
        if cfg.grid is not None and tuple(cfg.grid) != (grid.X, grid.Y):
            raise ConstructionError("the prediction fixture is defined on its own 8 x 8 grid")
        return scene_from_predictions(grid, ladder, fixture_users(cfg.K, normalize=cfg.normalize))
    X, Y = cfg.grid or (8, 8)
    grid = TilingGrid(X, Y, *cfg.fov)
    traces = load_traces(cfg.traces)
    users = list(cfg.trace_users) if cfg.trace_users else sorted(traces)[:cfg.K]
    preds = []
    for k, uid in enumerate(users[:cfg.K]):
        fovs, pm = estimate_probabilities(traces, uid, cfg.trace_position, grid)
        preds.append(UserPrediction(k + 1, tuple(fovs), pm))
    return scene_from_predictions(grid, ladder, preds)


def make_system(cfg: ExperimentConfig) -> SystemConfig:
    return SystemConfig(M=cfg.M, K=cfg.K, N=cfg.N, B=cfg.B, P=cfg.P, sigma2=cfg.sigma2,
                        pathloss=cfg.pathloss)


# ---------------------------------------------------------------------------
# running


RESULT_FIELDS = ("seed", "case", "scheme", "K", "M", "N", "L", "eps", "P", "objective",
                 "disc_objective", "gap", "q_pp", "q_ip", "q_up", "iterations", "status")


@dataclass
class ResultRow:
    seed: int
    case: str
    scheme: str
    K: int
    M: int
    N: int
    L: int
    eps: float
    P: float
    objective: float = math.nan
    disc_objective: float = math.nan
    gap: float = math.nan
    q_pp: float = math.nan
    q_ip: float = math.nan
    q_up: float = math.nan
    iterations: int = 0
    status: str = "ok"
    wall_time: float = 0.0
    x: object = None
    trace: object = field(default=None, repr=False)
    plan: object = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def cross_metrics(scene: SceneModel, r, eps: float) -> dict:
    """``r`` scored under all three metrics (pp uses the point estimate)."""
    u = LogUtility(scene.ladder.top)
    return {f"q_{c}": q_metric(c, r, scene.probability_models(c, eps), u).value for c in CASES}


def _internal(name: str) -> str:
    return name.replace("-", "_")


def run_point(cfg: ExperimentConfig, seed: int, x=None) -> list[ResultRow]:
    """All cases and schemes for one realisation at one sweep point."""
    scene = make_scene(cfg)
    sysc = make_system(cfg)
    channel = sample_channels(sysc, seed)
    settings = replace(cfg.settings(), seed=seed)
    base = dict(seed=seed, K=cfg.K, M=cfg.M, N=cfg.N, L=scene.ladder.L, eps=cfg.eps, P=cfg.P, x=x)
    rows = []
    for case in cfg.cases:
        probs = scene.probability_models(case, cfg.eps)
        warm, done = [], {}
        order = [s for s in ("sdma-opt", "sdma-zf", "ofdma-mrt")
                 if s in cfg.schemes or ("proposed" in cfg.schemes and cfg.warm_start)]
        for scheme in order:
            t0 = time.perf_counter()
            try:
                res = run_baseline(_internal(scheme), case, scene, channel, sysc, settings, probs)
            except (BaselineError, SolverError) as exc:
                done[scheme] = (None, str(exc), time.perf_counter() - t0)
                continue
            done[scheme] = (res, None, time.perf_counter() - t0)
            warm.append(res.plan)
        for scheme in cfg.schemes:
            row = ResultRow(case=case, scheme=scheme, **base)
            t0 = time.perf_counter()
            if scheme == "proposed":
                problem = build_problem(case, scene, probs, channel, sysc)
                try:
                    ms = multi_start(problem, settings, warm_starts=warm)
                except SolverError as exc:
                    row.status = f"error: {exc}"
                    rows.append(row)
                    continue
                plan, row.trace = ms.best, ms.trace
                row.iterations = ms.trace.iterations
                row.wall_time = time.perf_counter() - t0
            else:
                res, err, elapsed = done[scheme]
                row.wall_time = elapsed
                if res is None:
                    row.status = f"error: {err}"
                    rows.append(row)
                    continue
                problem, plan = res.problem, res.plan
                row.trace = res.info.get("trace")
                row.iterations = int(res.info.get("iterations", 0)) if res.scheme == "sdma_opt" else 0
            row.plan = plan
            row.objective = problem.metric(plan.r)
            disc = discretize(problem, plan)
            row.disc_objective, row.gap = disc.objective, disc.gap
            for key, val in cross_metrics(scene, plan.r, cfg.eps).items():
                setattr(row, key, val)
            rows.append(row)
    return rows


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> list[ResultRow]:
    """Every realisation at every sweep point; rows ordered by (point, seed, case, scheme)."""
    rows = []
    for x in cfg.points():
        pc = cfg.at(x)
        for rz in range(cfg.realizations):
            rows += run_point(pc, cfg.seed + rz, x)
    if out is not None:
        write_results(rows, out, cfg.sweep_axis)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_results(rows, out, axis=None) -> None:
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    cols = ("x",) + RESULT_FIELDS
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.x)] + [_fmt(getattr(r, c)) for c in RESULT_FIELDS])
    # timings vary between runs, so they live apart from the reproducible table
    with open(out / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "seed", "case", "scheme", "wall_time"])
        for r in rows:
            wr.writerow([_fmt(r.x), r.seed, r.case, r.scheme, f"{r.wall_time:.6f}"])
    for r in rows:
        if r.trace is not None:
            tag = f"_{axis}{r.x}" if axis else ""
            r.trace.to_csv(out / "traces" / f"{r.scheme}_{r.case}_seed{r.seed}{tag}.csv")


def read_results(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


PLOT_QUANTITIES = ("objective", "disc_objective", "q_pp", "q_ip", "q_up")


def emit_plot_data(results, axis: str, out=None, schemes=None) -> list[dict]:
    """Mean and standard error per (x, scheme, case, quantity).

    ``results`` are ResultRows or dicts read back from ``results.csv``.
    Failed rows are skipped.  With ``out`` a CSV ``plot_<axis>.csv`` is written
    (header only if nothing survives the filter).
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    recs = [asdict_row(r) for r in results]
    if schemes is not None:
        recs = [r for r in recs if r["scheme"] in schemes]
    recs = [r for r in recs if r["status"] == "ok"]
    groups: dict = {}
    for r in recs:
        x = float(r[axis])
        for q in PLOT_QUANTITIES:
            groups.setdefault((x, r["scheme"], r["case"], q), []).append(float(r[q]))
    table = []
    for (x, scheme, case, q) in sorted(groups):
        v = np.array(groups[(x, scheme, case, q)])
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        table.append({"x": x, "scheme": scheme, "case": case, "quantity": q,
                      "mean": float(v.mean()), "stderr": se, "n": int(v.size)})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"plot_{axis}.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.DictWriter(fh, ["x", "scheme", "case", "quantity", "mean", "stderr", "n"])
            wr.writeheader()
            for row in table:
                wr.writerow({k: _fmt(v) for k, v in row.items()})
    return table


def asdict_row(r) -> dict:
    if isinstance(r, dict):
        return r
    return {f.name: getattr(r, f.name) for f in fields(r) if f.name not in ("trace", "plan")}


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsvr", description="Rate-splitting 360 video streaming experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write result CSVs")
    r.add_argument("--config", required=True)
    r.add_argument("--case", choices=CASES + ("all",), default=None)
    r.add_argument("--scheme", choices=SCHEME_NAMES + ("all",), default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--realizations", type=int, default=None)
    r.add_argument("--out", default="results")
    r.add_argument("--scale-ladder", type=float, default=None)
    q = sub.add_parser("plot-data", help="aggregate results into plot-ready CSV")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--axis", choices=AXES, required=True)
    q.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        try:
            cfg = load_config(args.config)
            over = {}
            if args.case:
                over["cases"] = CASES if args.case == "all" else (args.case,)
            if args.scheme:
                over["schemes"] = SCHEME_NAMES if args.scheme == "all" else (args.scheme,)
            if args.seed is not None:
                over["seed"] = args.seed
            if args.realizations is not None:
                over["realizations"] = args.realizations
            if args.scale_ladder is not None:
                over["scale_ladder"] = args.scale_ladder
            cfg = replace(cfg, **over)
        except (ConstructionError, OSError, yaml.YAMLError, KeyError, TypeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        rows = run(cfg, args.out)
        failed = [r for r in rows if not r.ok]
        for r in failed:
            print(f"seed {r.seed} {r.case} {r.scheme}: {r.status}", file=sys.stderr)
        print(f"{len(rows)} rows, {len(failed)} failed -> {Path(args.out) / 'results.csv'}")
        return 0 if not failed else 1
    rows = read_results(args.inp)
    out = args.out or (args.inp if Path(args.inp).is_dir() else Path(args.inp).parent)
    table = emit_plot_data(rows, args.axis, out)
    print(f"{len(table)} aggregated points -> {Path(out) / f'plot_{args.axis}.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

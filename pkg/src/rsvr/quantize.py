"""Rounding relaxed plans onto the encoding-rate ladder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError
from .formulation import (DCProblem, DecisionVars, apply_max_rule, complete_aux,
                          rebalance_messages)
from .scene import RateLadder

# rates within this relative distance below a rung count as being on it
SNAP = 1e-9


@dataclass
class DiscretePlan:
    vars: DecisionVars
    objective: float
    cont_objective: float
    gap: float
    ladder: RateLadder
    lowered: int          # smoothness repairs (one ladder step each)


def round_down(values, ladder: RateLadder) -> np.ndarray:
    """Largest grid value in ``{0, D_1, ..., D_L}`` not above each entry."""
    grid = ladder.grid_values
    v = np.asarray(values, dtype=float)
    pos = np.searchsorted(grid, v * (1 + SNAP), side="right") - 1
    return grid[np.clip(pos, 0, None)]


def on_ladder(values, ladder: RateLadder) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.isin(v, ladder.grid_values)))


def _smooth(r: np.ndarray, cover: np.ndarray, grid: np.ndarray, delta: float) -> tuple[np.ndarray, int]:
    """Lower the larger rate of any overlapping FoV pair whose gap exceeds ``delta``."""
    r = r.copy()
    overlap = (cover.astype(int) @ cover.T.astype(int)) > 0
    steps = 0
    while True:
        diff = r[:, None] - r[None, :]
        bad = overlap & (diff > delta * (1 + SNAP))
        if not bad.any():
            return r, steps
        i = int(np.flatnonzero(bad.any(axis=1))[np.argmax(r[bad.any(axis=1)])])
        level = np.searchsorted(grid, r[i]) - 1
        r[i] = grid[max(level, 0)]
        steps += 1


def discretize(problem: DCProblem, plan: DecisionVars, ladder: RateLadder | None = None) -> DiscretePlan:
    """Round ``r`` down onto ``ladder``, reapply the max rule and rebalance ``d``.

    Beamformers are kept, so the rate constraints can only loosen.
    """
    ladder = ladder or problem.scene.ladder
    if ladder.top > problem.D_L * (1 + SNAP):
        raise ValueError("ladder tops out above the relaxed problem's D_L")
    grid = ladder.grid_values
    delta = problem.delta
    v = plan.copy()
    new_r, lowered = [], 0
    for geo, r in zip(problem.geometry, plan.r):
        rd, steps = _smooth(round_down(r, ladder), geo.cover, grid, delta)
        new_r.append(rd)
        lowered += steps
    v.r = new_r
    v.R = apply_max_rule(problem.scene, new_r)
    v = complete_aux(problem, rebalance_messages(v), overwrite=True)
    cont = problem.metric(plan.r)
    disc = problem.metric(v.r)
    return DiscretePlan(v, disc, cont, gap(cont, disc), ladder, lowered)


def gap(cont_obj: float, disc_obj: float) -> float:
    d = float(cont_obj) - float(disc_obj)
    if d < -1e-9:
        raise QuantizationError(f"discrete objective exceeds continuous by {-d:g}")
    return max(d, 0.0)

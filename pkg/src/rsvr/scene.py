"""Tiled 360 video geometry, FoV coverage sets and viewing-probability models.

Tiles are addressed 1-based as ``(x, y)`` = (row, column).  Viewpoints are
numbered row-major, so viewpoint ``v`` sits on tile
``(ceil(v / Y), v - Y * (ceil(v / Y) - 1))``.  FoV blocks wrap horizontally
(equirectangular seam) and are shifted inward at the poles.
"""
from __future__ import annotations

import csv
import math
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConstructionError, DomainError, EstimationError

CASES = ("pp", "ip", "up")

# Default smoothness tolerance as a fraction of the top rung.  Large enough
# that neighbouring rungs of the standard ladders (D_2 - D_1 on an overlap)
# stay admissible.
DEFAULT_DELTA_FRACTION = 0.45

Tile = tuple[int, int]


@dataclass(frozen=True)
class TilingGrid:
    X: int
    Y: int
    fov_rows: int = 3
    fov_cols: int = 3

    def __post_init__(self):
        for name in ("X", "Y", "fov_rows", "fov_cols"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConstructionError(f"{name} must be a positive integer, got {v!r}")
        if self.fov_rows > self.X or self.fov_cols > self.Y:
            raise ConstructionError("FoV extent exceeds the tiling grid")

    @property
    def n_viewpoints(self) -> int:
        return self.X * self.Y

    def tile_of(self, viewpoint: int) -> Tile:
        if not 1 <= viewpoint <= self.n_viewpoints:
            raise DomainError(f"viewpoint {viewpoint} outside 1..{self.n_viewpoints}")
        x = -(-viewpoint // self.Y)
        return x, viewpoint - self.Y * (x - 1)

    def viewpoint_of(self, tile: Tile) -> int:
        x, y = tile
        return (x - 1) * self.Y + y


@dataclass(frozen=True)
class FovSet:
    index: int
    tiles: frozenset


def fov_tiles(grid: TilingGrid, viewpoint: int) -> FovSet:
    """Tile block covered by the FoV centred on ``viewpoint``."""
    x, y = grid.tile_of(viewpoint)
    x0 = x - (grid.fov_rows - 1) // 2
    x0 = min(max(x0, 1), grid.X - grid.fov_rows + 1)
    y0 = y - (grid.fov_cols - 1) // 2
    tiles = frozenset(
        (x0 + a, (y0 - 1 + b) % grid.Y + 1)
        for a in range(grid.fov_rows)
        for b in range(grid.fov_cols)
    )
    return FovSet(viewpoint, tiles)


def union_fovs(fovs: Sequence[FovSet]) -> frozenset:
    if not fovs:
        raise DomainError("union of an empty FoV list")
    out = set()
    for f in fovs:
        out |= f.tiles
    return frozenset(out)


def exclusive_tiles(fovs: Sequence[FovSet], i: int) -> frozenset:
    """Tiles of FoV ``i`` that no other FoV of the list covers.

    ``i`` is a position in ``fovs`` (not a viewpoint number), so that lists
    holding the same viewpoint twice stay addressable.
    """
    if not 0 <= i < len(fovs):
        raise DomainError(f"FoV position {i} not in list of length {len(fovs)}")
    others = set()
    for j, f in enumerate(fovs):
        if j != i:
            others |= f.tiles
    return frozenset(fovs[i].tiles - others)


def neighborhood(grid: TilingGrid, i_k: int) -> tuple[int, ...]:
    """``i_k`` and its up/left/right/down neighbours, wrapped horizontally."""
    x, y = grid.tile_of(i_k)
    out = {i_k}
    if x > 1:
        out.add(i_k - grid.Y)
    if x < grid.X:
        out.add(i_k + grid.Y)
    out.add(grid.viewpoint_of((x, (y - 2) % grid.Y + 1)))
    out.add(grid.viewpoint_of((x, y % grid.Y + 1)))
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# probabilities


def box_bounds(p_hat, eps) -> tuple[np.ndarray, np.ndarray]:
    """Clip ``p_hat -/+ eps`` to [0, 1]; reject empty uncertainty sets."""
    p_hat = np.asarray(p_hat, dtype=float)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), p_hat.shape)
    if np.any(eps < 0) or np.any(eps > 1):
        raise DomainError("estimation error bounds must lie in [0, 1]")
    lower = np.maximum(p_hat - eps, 0.0)
    upper = np.minimum(p_hat + eps, 1.0)
    if lower.sum() > 1 + 1e-12 or upper.sum() < 1 - 1e-12:
        raise ConstructionError(
            f"empty uncertainty set: sum(lower)={lower.sum():.6g}, sum(upper)={upper.sum():.6g}"
        )
    return lower, upper


@dataclass(frozen=True)
class ProbabilityModel:
    case: str
    size: int
    p: np.ndarray | None = None
    p_hat: np.ndarray | None = None
    eps: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @classmethod
    def perfect(cls, p, strict: bool = True) -> "ProbabilityModel":
        p = np.asarray(p, dtype=float)
        if np.any(p < 0):
            raise ConstructionError("negative probability")
        if strict and abs(p.sum() - 1.0) > 1e-9:
            raise ConstructionError(f"probabilities sum to {p.sum():.6g}, not 1")
        return cls("pp", len(p), p=p)

    @classmethod
    def imperfect(cls, p_hat, eps) -> "ProbabilityModel":
        p_hat = np.asarray(p_hat, dtype=float)
        eps = np.broadcast_to(np.asarray(eps, dtype=float), p_hat.shape).copy()
        lower, upper = box_bounds(p_hat, eps)
        return cls("ip", len(p_hat), p_hat=p_hat, eps=eps, lower=lower, upper=upper)

    @classmethod
    def unknown(cls, size: int) -> "ProbabilityModel":
        return cls("up", int(size))

    def contains(self, p, tol: float = 1e-9) -> bool:
        """Whether ``p`` is a distribution compatible with this model."""
        p = np.asarray(p, dtype=float)
        if len(p) != self.size or np.any(p < -tol) or abs(p.sum() - 1) > tol:
            return False
        if self.case == "pp":
            return bool(np.allclose(p, self.p, atol=tol))
        if self.case == "ip":
            return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))
        return True


def estimate_probabilities(
    traces: Mapping[object, Sequence[int]],
    user,
    position: int,
    grid: TilingGrid,
) -> tuple[tuple[int, ...], ProbabilityModel]:
    """Transition-count estimate of the next-FoV distribution for ``user``.

    ``position`` is the 1-based index of the element being predicted; the
    conditioning viewpoint is the user's own element at ``position - 1`` and
    the counts come from every *other* trace.  Transitions leaving the
    neighbourhood are ignored.
    """
    if position < 2:
        raise DomainError("position must be at least 2")
    own = traces[user]
    if len(own) < position - 1:
        raise EstimationError(f"trace of user {user!r} is shorter than {position - 1}")
    i_k = int(own[position - 2])
    fovs = neighborhood(grid, i_k)
    counts = dict.fromkeys(fovs, 0)
    for other, seq in traces.items():
        if other == user or len(seq) < position:
            continue
        if int(seq[position - 2]) == i_k and int(seq[position - 1]) in counts:
            counts[int(seq[position - 1])] += 1
    total = sum(counts.values())
    if total == 0:
        raise EstimationError(f"no trace leaves viewpoint {i_k} into its neighbourhood")
    p = [float(Fraction(counts[i], total)) for i in fovs]
    # float rounding of the exact fractions can leave the correctly rounded
    # sum an ulp off; nudge the largest entry until it is exactly 1
    big = max(range(len(p)), key=p.__getitem__)
    for _ in range(8):
        slack = 1.0 - math.fsum(p)
        if slack == 0.0:
            break
        p[big] += slack
    return fovs, ProbabilityModel.perfect(p)


def load_traces(path) -> dict[str, list[int]]:
    """Read a ``user_id, t_index, viewpoint`` CSV into per-user sequences."""
    rows: dict[str, list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"user_id", "t_index", "viewpoint"} - set(reader.fieldnames or ())
        if missing:
            raise ConstructionError(f"trace file lacks columns {sorted(missing)}")
        for row in reader:
            rows.setdefault(row["user_id"], []).append((int(row["t_index"]), int(row["viewpoint"])))
    return {u: [v for _, v in sorted(seq)] for u, seq in rows.items()}


# ---------------------------------------------------------------------------
# rate ladder and fixtures


@dataclass(frozen=True)
class RateLadder:
    levels: tuple[float, ...]
    delta: float

    def __post_init__(self):
        lv = self.levels
        if len(lv) == 0 or lv[0] <= 0 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConstructionError("ladder levels must be positive and strictly increasing")
        if not self.delta > 0:
            raise ConstructionError("smoothness tolerance must be positive")

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> float:
        return self.levels[-1]

    @property
    def grid_values(self) -> np.ndarray:
        """Admissible discrete rates ``0, D_1, ..., D_L``."""
        return np.concatenate([[0.0], np.asarray(self.levels)])


def _load_json(name: str) -> dict:
    with resources.files("rsvr.data").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def standard_ladder(L: int, scale: float = 1.0, delta: float | None = None) -> RateLadder:
    """Table I encoding rates (bits/s), divided by ``scale`` for desk runs."""
    data = _load_json("encoding_ladders.json")["ladders"]
    if str(L) not in data:
        raise DomainError(f"no Table I ladder with L={L}; have {sorted(data)}")
    levels = tuple(v * 1e6 / scale for v in data[str(L)])
    if delta is None:
        delta = DEFAULT_DELTA_FRACTION * levels[-1]
    return RateLadder(levels, delta)


@dataclass(frozen=True)
class UserPrediction:
    user: int
    fov_indices: tuple[int, ...]
    probability: ProbabilityModel

    def __post_init__(self):
        if len(self.fov_indices) < 1:
            raise ConstructionError("a user needs at least one predicted FoV")
        if len(set(self.fov_indices)) != len(self.fov_indices):
            raise ConstructionError("duplicate FoV indices")
        if self.probability.size != len(self.fov_indices):
            raise ConstructionError("probability vector does not match the FoV set")

    @property
    def p_hat(self) -> np.ndarray:
        pm = self.probability
        return pm.p if pm.case == "pp" else pm.p_hat


def fixture_users(K: int | None = None, normalize: bool = False) -> list[UserPrediction]:
    """The Table II prediction fixture.

    Row 1 sums to 1.036 as printed; pass ``normalize=True`` to rescale each
    row to a distribution.
    """
    rows = _load_json("viewpoint_predictions.json")["users"]
    if K is not None:
        if not 1 <= K <= len(rows):
            raise DomainError(f"Table II has {len(rows)} users")
        rows = rows[:K]
    out = []
    for row in rows:
        p = np.asarray(row["p"], dtype=float)
        if normalize:
            p = p / p.sum()
        out.append(UserPrediction(row["k"], tuple(row["fovs"]),
                                  ProbabilityModel.perfect(p, strict=normalize)))
    return out


def fixture_grid() -> TilingGrid:
    return TilingGrid(**_load_json("viewpoint_predictions.json")["grid"])


# ---------------------------------------------------------------------------
# per-user geometry


@dataclass(frozen=True)
class UserGeometry:
    fovs: tuple[FovSet, ...]
    tiles: tuple[Tile, ...]        # sorted union of the FoVs
    cover: np.ndarray              # bool, (n_fovs, n_tiles)

    @property
    def n_fovs(self) -> int:
        return len(self.fovs)

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)


@dataclass(frozen=True)
class SceneModel:
    grid: TilingGrid
    ladder: RateLadder
    users: tuple[UserPrediction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        for u in self.users:
            for i in u.fov_indices:
                if not 1 <= i <= self.grid.n_viewpoints:
                    raise ConstructionError(f"FoV {i} of user {u.user} is not a viewpoint")

    @property
    def K(self) -> int:
        return len(self.users)

    @cached_property
    def geometry(self) -> tuple[UserGeometry, ...]:
        out = []
        for u in self.users:
            fovs = tuple(fov_tiles(self.grid, i) for i in u.fov_indices)
            tiles = tuple(sorted(union_fovs(fovs)))
            col = {t: j for j, t in enumerate(tiles)}
            cover = np.zeros((len(fovs), len(tiles)), dtype=bool)
            for i, f in enumerate(fovs):
                cover[i, [col[t] for t in f.tiles]] = True
            out.append(UserGeometry(fovs, tiles, cover))
        return tuple(out)

    def probability_models(self, case: str, eps=0.0) -> list[ProbabilityModel]:
        """Per-user models for ``case`` built from the stored estimates."""
        if case not in CASES:
            raise DomainError(f"unknown case {case!r}")
        if case == "pp":
            return [ProbabilityModel.perfect(u.p_hat) for u in self.users]
        if case == "ip":
            return [ProbabilityModel.imperfect(u.p_hat, eps) for u in self.users]
        return [ProbabilityModel.unknown(len(u.fov_indices)) for u in self.users]

    def subset(self, K: int) -> "SceneModel":
        return SceneModel(self.grid, self.ladder, self.users[:K])


def scene_from_predictions(
    grid: TilingGrid, ladder: RateLadder, predictions: Iterable[UserPrediction]
) -> SceneModel:
    return SceneModel(grid, ladder, tuple(predictions))


"""FoV utility and the three total-utility metrics.

The log utility ``a * log(c * r / D_L)`` is negative below ``D_L / c``; it is
clamped to zero there so that it is nonnegative and vanishes at zero rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .scene import ProbabilityModel

_RATE_SLACK = 1e-9


@dataclass(frozen=True)
class LogUtility:
    D_L: float
    a: float = 0.6
    c: float = 1000.0
    base: float = math.e

    def __post_init__(self):
        if self.D_L <= 0 or self.a <= 0 or self.c <= 1:
            raise DomainError("utility needs D_L > 0, a > 0 and c > 1")

    @property
    def r_floor(self) -> float:
        """Zero crossing of the log formula."""
        return self.D_L / self.c

    @property
    def scale(self) -> float:
        """Coefficient in front of the natural log."""
        return self.a / math.log(self.base)

    @property
    def top(self) -> float:
        return self.scale * math.log(self.c)

    def formula(self, r):
        """The unclamped log expression (``-inf`` at zero)."""
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return self.scale * np.log(self.c * r / self.D_L)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < -_RATE_SLACK * self.D_L) or np.any(r > (1 + _RATE_SLACK) * self.D_L):
            raise DomainError("utility evaluated outside [0, D_L]")
        r = np.clip(r, 0.0, self.D_L)
        out = np.where(r >= self.r_floor, self.formula(np.maximum(r, self.r_floor)), 0.0)
        return out if out.ndim else float(out)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r >= self.r_floor, self.scale / np.maximum(r, self.r_floor), 0.0)


@dataclass(frozen=True)
class MetricValue:
    case: str
    value: float
    per_user: tuple[float, ...]
    worst_p: tuple[np.ndarray, ...] | None = None


def worst_case_distribution(u_vals, lower, upper) -> np.ndarray:
    """Minimiser of ``p @ u_vals`` over the box-constrained simplex.

    Start from the lower bounds and pour the remaining mass into the FoVs in
    ascending utility order, each up to its upper bound.
    """
    u_vals = np.asarray(u_vals, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.sum() > 1 + 1e-12 or upper.sum() < 1 - 1e-12 or np.any(lower > upper):
        raise DomainError("infeasible probability bounds")
    p = lower.copy()
    rest = 1.0 - lower.sum()
    for i in np.argsort(u_vals, kind="stable"):
        if rest <= 0:
            break
        step = min(upper[i] - lower[i], rest)
        p[i] += step
        rest -= step
    return p


def worst_case_duals(u_vals, lower, upper) -> tuple[np.ndarray, np.ndarray, float]:
    """Optimal ``(lambda, tau, gamma)`` of the dual of the inner minimisation.

    Dual: maximise ``tau @ lower - lam @ upper - gamma`` subject to
    ``u + lam - tau + gamma >= 0``, ``lam, tau >= 0``.  With the greedy
    threshold utility ``u*`` (that of the last FoV receiving mass),
    ``gamma = -u*``, ``lam = (u* - u)^+`` and ``tau = (u - u*)^+``.
    """
    u_vals = np.asarray(u_vals, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    p = worst_case_distribution(u_vals, lower, upper)
    filled = np.flatnonzero(p > lower + 1e-15)
    if filled.size:
        threshold = u_vals[filled].max()
    else:
        # all mass sits on the lower bounds; any threshold below min(u) works
        threshold = u_vals.min()
    lam = np.maximum(threshold - u_vals, 0.0)
    tau = np.maximum(u_vals - threshold, 0.0)
    return lam, tau, -float(threshold)


def q_metric(case: str, r: Sequence, prob: Sequence[ProbabilityModel], u: LogUtility) -> MetricValue:
    """Total utility of FoV min-rates ``r`` (one array per user) under ``case``."""
    if len(r) != len(prob):
        raise DomainError("one probability model per user required")
    per_user, worst = [], []
    for r_k, pm in zip(r, prob):
        if pm.case != case:
            raise DomainError(f"probability model of case {pm.case!r} used for metric {case!r}")
        vals = np.atleast_1d(u(np.asarray(r_k, dtype=float)))
        if len(vals) != pm.size:
            raise DomainError("rate vector does not match the FoV set")
        if case == "pp":
            per_user.append(float(pm.p @ vals))
        elif case == "ip":
            p = worst_case_distribution(vals, pm.lower, pm.upper)
            worst.append(p)
            per_user.append(float(p @ vals))
        elif case == "up":
            per_user.append(float(vals.min()))
        else:
            raise DomainError(f"unknown case {case!r}")
    return MetricValue(case, float(sum(per_user)), tuple(per_user),
                       tuple(worst) if case == "ip" else None)

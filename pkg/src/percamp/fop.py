"""Piecewise-constant functional order parameters.

A functional order parameter gamma is a nondecreasing right-continuous step
function [0,1] -> [0,1] that starts at 0 and reaches 1 strictly before 1:

    gamma = sum_i m_i 1[q_i, q_{i+1}),   0 = q_0 < q_1 < ... < q_{n+1} = 1,
                                         0 = m_0 <= m_1 <= ... <= m_n = 1.

`levels[i]` is the value on [breakpoints[i-1], breakpoints[i]) with the
implicit q_0 = 0, so both tuples have length n+1.  Instances are immutable
and validated on construction (no silent clamping).

Besides the function itself this module owns the integral functionals the
rest of the pipeline consumes:

    lambda_of(gamma, q)    = int_q^1 gamma(t) dt            (piecewise linear)
    inv_lambda_integral    = int_a^b dq / lambda(q)         (piecewise log)
    inv_lambda_sq_integral = int_a^b dq / lambda(q)^2       (piecewise rational)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Fop",
    "step_fop",
    "q_under",
    "q_bar",
    "lambda_of",
    "gamma_at",
    "l1_distance",
    "strictly_increasing_on_support",
    "inv_lambda_integral",
    "inv_lambda_sq_integral",
]


@dataclass(frozen=True)
class Fop:
    breakpoints: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(q) for q in self.breakpoints))
        object.__setattr__(self, "levels", tuple(float(m) for m in self.levels))
        q, m = self.breakpoints, self.levels
        if len(q) != len(m):
            raise ValueError("breakpoints and levels must have equal length")
        if len(q) < 2:
            raise ValueError("need at least two pieces (level 0 then level 1)")
        if any(not math.isfinite(v) for v in q + m):
            raise ValueError("breakpoints and levels must be finite")
        if q[-1] != 1.0:
            raise ValueError("last breakpoint must be exactly 1")
        if q[0] <= 0.0:
            raise ValueError("breakpoints must lie in (0, 1]")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if m[0] != 0.0:
            raise ValueError("first level must be exactly 0")
        if m[-1] != 1.0:
            raise ValueError("last level must be exactly 1")
        if any(b < a for a, b in zip(m, m[1:])):
            raise ValueError("levels must be nondecreasing")
        if any(not 0.0 <= v <= 1.0 for v in m):
            raise ValueError("levels must lie in [0, 1]")
        # q_bar = breakpoint where the level first reaches 1; it precedes the
        # final breakpoint 1, so q_bar < 1 holds for every validated instance.

    # -- serialization -----------------------------------------------------
    def to_json_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "levels": list(self.levels)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Fop":
        extra = set(d) - {"breakpoints", "levels"}
        if extra:
            raise ValueError(f"unknown Fop fields: {sorted(extra)}")
        return cls(tuple(d["breakpoints"]), tuple(d["levels"]))


def step_fop(q: float) -> Fop:
    """Replica-symmetric step 1{t >= q}."""
    if not 0.0 < q < 1.0:
        raise ValueError("step location must lie in (0, 1)")
    return Fop((q, 1.0), (0.0, 1.0))


def _edges(gamma: Fop) -> np.ndarray:
    """Segment edges (0, q_1, ..., q_{n+1}): levels[i] holds on [e[i], e[i+1))."""
    return np.concatenate(([0.0], np.asarray(gamma.breakpoints)))


def gamma_at(gamma: Fop, t) -> np.ndarray | float:
    """gamma(t), right-continuous; t = 1 clamps to the last level."""
    q = np.asarray(gamma.breakpoints)
    m = np.asarray(gamma.levels)
    idx = np.searchsorted(q, np.asarray(t, dtype=float), side="right")
    idx = np.minimum(idx, len(m) - 1)
    out = m[idx]
    return float(out) if out.ndim == 0 else out


def q_under(gamma: Fop) -> float:
    """Left end of the support: inf{t : gamma(t) > 0}."""
    for i, lev in enumerate(gamma.levels):
        if lev > 0.0:
            return gamma.breakpoints[i - 1] if i > 0 else 0.0
    raise ValueError("gamma is identically zero")  # unreachable for valid Fop


def q_bar(gamma: Fop) -> float:
    """Right end of the support: sup{t : gamma(t) < 1}."""
    for i, lev in enumerate(gamma.levels):
        if lev >= 1.0:
            return gamma.breakpoints[i - 1] if i > 0 else 0.0
    raise ValueError("gamma never reaches 1")  # unreachable for valid Fop


def lambda_of(gamma: Fop, q: float) -> float:
    """lambda(q) = int_q^1 gamma(t) dt, exact over the step segments."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    e = _edges(gamma)
    m = np.asarray(gamma.levels)
    lo = np.maximum(e[:-1], q)
    hi = e[1:]
    seg = np.clip(hi - lo, 0.0, None)
    return float(np.dot(m, seg))


def l1_distance(g1: Fop, g2: Fop) -> float:
    """int_0^1 |g1 - g2| over the merged breakpoint partition (exact)."""
    e = np.unique(np.concatenate((_edges(g1), _edges(g2))))
    mid = 0.5 * (e[:-1] + e[1:])
    d = np.abs(gamma_at(g1, mid) - gamma_at(g2, mid))
    return float(np.dot(d, np.diff(e)))


def strictly_increasing_on_support(gamma: Fop, min_jump: float = 1e-3) -> bool:
    """Numeric no-overlap-gap proxy.

    True iff q_under < q_bar and every consecutive level gap from the first
    positive level up to the jump into 1 is at least min_jump.
    """
    if min_jump <= 0:
        raise ValueError("min_jump must be positive")
    m = gamma.levels
    i0 = next(i for i, v in enumerate(m) if v > 0.0)
    i1 = next(i for i, v in enumerate(m) if v >= 1.0)
    if i1 <= i0:  # single jump: q_under == q_bar
        return False
    return all(m[i + 1] - m[i] >= min_jump for i in range(i0, i1))


def _segments_above(gamma: Fop, a: float, b: float):
    """(lo, hi, level) pieces of [a, b] on which gamma is constant."""
    e = _edges(gamma)
    m = gamma.levels
    out = []
    for i, lev in enumerate(m):
        lo = max(e[i], a)
        hi = min(e[i + 1], b)
        if hi > lo:
            out.append((lo, hi, lev))
    return out


def inv_lambda_integral(gamma: Fop, a: float, b: float) -> float:
    """int_a^b dq / lambda(q), closed form.

    On a segment with level m, lambda(q) = lambda(lo) - m (q - lo), so the
    integral is log(lambda(lo)/lambda(hi)) / m, or length/lambda for m = 0.
    Requires b <= q_bar (lambda vanishes only at 1 > q_bar).
    """
    if b < a:
        raise ValueError("need a <= b")
    total = 0.0
    for lo, hi, m in _segments_above(gamma, a, b):
        lam_lo = lambda_of(gamma, lo)
        lam_hi = lam_lo - m * (hi - lo)
        if lam_hi <= 0.0:
            raise ValueError("lambda reaches 0 inside the integration range")
        if m == 0.0:
            total += (hi - lo) / lam_lo
        else:
            total += math.log(lam_lo / lam_hi) / m
    return total


def inv_lambda_sq_integral(gamma: Fop, a: float, b: float) -> float:
    """int_a^b dq / lambda(q)^2, closed form ((1/lam_hi - 1/lam_lo)/m pieces)."""
    if b < a:
        raise ValueError("need a <= b")
    total = 0.0
    for lo, hi, m in _segments_above(gamma, a, b):
        lam_lo = lambda_of(gamma, lo)
        lam_hi = lam_lo - m * (hi - lo)
        if lam_hi <= 0.0:
            raise ValueError("lambda reaches 0 inside the integration range")
        if m == 0.0:
            total += (hi - lo) / (lam_lo * lam_lo)
        else:
            total += (1.0 / lam_hi - 1.0 / lam_lo) / m
    return total

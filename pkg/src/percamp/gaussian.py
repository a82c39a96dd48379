"""Numerically stable Gaussian special functions.

Everything in this package that involves an expectation over Z ~ N(0,1) goes
through the probabilist Gauss-Hermite rule built here, and all Gaussian-tail
arithmetic goes through the two stable primitives:

    log_gauss_tail(x) = log P(Z >= x)
    mills(x)          = phi(x) / P(Z >= x)        (inverse Mills ratio)

Both are evaluated through the scaled complementary error function, so they
stay accurate far into the tails where a naive 1 - CDF subtraction loses all
digits.  On top of these sit the replica-symmetric capacity and the
replica-symmetric (Gardner) free-energy minimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import erfcx, log_ndtr, ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)

__all__ = [
    "QuadratureRule",
    "gauss_hermite",
    "log_gauss_tail",
    "mills",
    "mills_deriv",
    "rs_capacity",
    "gardner_rs",
    "rs_objective",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights for E[f(Z)], Z ~ N(0,1): sum(w) = 1, nodes symmetric."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "gauss-hermite-probabilist"

    def __post_init__(self):
        n, w = np.asarray(self.nodes), np.asarray(self.weights)
        if n.shape != w.shape or n.ndim != 1:
            raise ValueError("nodes and weights must be 1-D of equal length")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 (probabilist normalization)")
        if np.max(np.abs(n + n[::-1])) > 1e-12:
            raise ValueError("nodes must be symmetric about 0")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")

    def expect(self, f) -> float:
        """E[f(Z)] for a vectorized callable f."""
        return float(np.dot(f(self.nodes), self.weights))


def gauss_hermite(n: int = 120) -> QuadratureRule:
    """Probabilist Gauss-Hermite rule: integrates against e^{-z^2/2}/sqrt(2 pi)."""
    if n < 2:
        raise ValueError("need n >= 2 quadrature nodes")
    z, w = hermegauss(n)
    w = w / SQRT_2PI
    # hermegauss returns antisymmetric-to-roundoff nodes; symmetrize exactly
    z = 0.5 * (z - z[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    return QuadratureRule(nodes=z, weights=w)


def _check_finite(x, name: str = "x"):
    if np.any(~np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def log_gauss_tail(x):
    """log P(Z >= x) for Z ~ N(0,1), accurate over the whole real line.

    P(Z >= x) = P(Z <= -x), so this is the stable Gaussian log-CDF at -x
    (erfc/erfcx based; no cancellation for large |x|).
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = log_ndtr(-x)
    return float(out) if out.ndim == 0 else out


def mills(x):
    """Inverse Mills ratio A(x) = e^{-x^2/2} / (sqrt(2 pi) P(Z >= x)).

    Computed as sqrt(2/pi) / erfcx(x/sqrt(2)): exact cancellation of the
    Gaussian factor, so no under/overflow until A itself underflows
    (x < -38 or so, where A < 1e-300 is flushed to 0).
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    with np.errstate(over="ignore"):
        denom = erfcx(x / math.sqrt(2.0))
        out = np.where(np.isinf(denom), 0.0, math.sqrt(2.0 / math.pi) / denom)
    return float(out) if out.ndim == 0 else out


def mills_deriv(x, k: int = 1):
    """k-th derivative of the inverse Mills ratio, k in {1, 2, 3}.

    A'  = A^2 - x A          (quotient rule)
    A'' = A'(2A - x) - A
    A''' = A''(2A - x) + 2 A'^2 - 2 A'
    """
    if k not in (1, 2, 3):
        raise ValueError("derivative order k must be 1, 2 or 3")
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    a = mills(x)
    d1 = a * (a - x)
    if k == 1:
        out = d1
    elif k == 2:
        out = d1 * (2.0 * a - x) - a
    else:
        d2 = d1 * (2.0 * a - x) - a
        out = d2 * (2.0 * a - x) + 2.0 * d1 * d1 - 2.0 * d1
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def _neg_part_sq_mean(kappa: float) -> float:
    """E[(kappa - Z)_+^2] = (1 + kappa^2) P(Z <= kappa) + kappa phi(kappa)."""
    pdf = math.exp(-0.5 * kappa * kappa) / SQRT_2PI
    return (1.0 + kappa * kappa) * float(ndtr(kappa)) + kappa * pdf


def rs_capacity(kappa: float) -> float:
    """Replica-symmetric capacity 1 / E[(kappa - Z)_+^2].

    Closed form, validated against quadrature in the test suite; strictly
    decreasing in kappa, equals 2 at kappa = 0.
    """
    _check_finite(kappa, "kappa")
    return 1.0 / _neg_part_sq_mean(float(kappa))


def rs_objective(q: float, alpha: float, kappa: float,
                 rule: QuadratureRule | None = None) -> float:
    """Replica-symmetric free-energy functional at overlap q in [0, 1).

    alpha * E log P(Z' >= (kappa - sqrt(q) Z)/sqrt(1-q))
        + q / (2 (1-q)) + log(1-q) / 2
    """
    if not 0.0 <= q < 1.0:
        raise ValueError("q must lie in [0, 1)")
    rule = rule or _default_rule()
    s = math.sqrt(1.0 - q)
    e = float(np.dot(log_gauss_tail((kappa - math.sqrt(q) * rule.nodes) / s),
                     rule.weights))
    return alpha * e + 0.5 * q / (1.0 - q) + 0.5 * math.log1p(-q)


_RULE_CACHE: dict[int, QuadratureRule] = {}


def _default_rule(n: int = 120) -> QuadratureRule:
    if n not in _RULE_CACHE:
        _RULE_CACHE[n] = gauss_hermite(n)
    return _RULE_CACHE[n]


def gardner_rs(alpha: float, kappa: float, rule: QuadratureRule | None = None,
               eta: float = 1e-6, q_tol: float = 1e-10) -> tuple[float, float]:
    """Minimize the replica-symmetric objective over q in [0, 1 - eta].

    Returns (value, q_star).  For alpha above the replica-symmetric capacity
    the infimum escapes to q -> 1 and the value is -inf; we return
    (-inf, nan) in that regime.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha > rs_capacity(kappa):
        return (-math.inf, math.nan)
    rule = rule or _default_rule()

    obj = lambda q: rs_objective(q, alpha, kappa, rule)
    hi = 1.0 - eta
    grid = np.linspace(0.0, hi, 201)
    vals = [obj(q) for q in grid]
    i = int(np.argmin(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]

    # golden-section refinement
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = obj(c), obj(d)
    while b - a > q_tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = obj(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = obj(d)
    q_star = 0.5 * (a + b)
    return (obj(q_star), q_star)

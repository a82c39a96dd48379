"""Backward Cole-Hopf solver for the Parisi PDE of the spherical perceptron.

For a piecewise-constant order parameter the PDE

    dPhi/dt + (gamma(t) (dPhi/dx)^2 + d^2Phi/dx^2) / 2 = 0,
    Phi(q_bar, x) = log P(Z >= (kappa - x)/sqrt(1 - q_bar)),

has an explicit solution on each constant piece [a, b) with level m:

    Phi(t, x) = (1/m) log E[ exp(m Phi(b, x + sqrt(b - t) Z)) ],

(the plain heat semigroup when m = 0).  The solver walks the pieces
backward from q_bar, producing every requested time level directly from the
stored piece-end row, so time stepping introduces no accumulation error;
the only error sources are the Gauss-Hermite quadrature and the cubic
interpolation of the piece-end row.

Spatial derivatives are propagated by tilted-measure expectations obtained
by differentiating the Cole-Hopf formula under the integral (never by
differencing the solution):

    dPhi   = <psi1>
    d2Phi  = <psi2> + m Var(psi1)
    d3Phi  = <psi3> + 3 m Cov(psi1, psi2) + m^2 k3(psi1)

with psi_k the k-th derivative at the piece end and <.> the normalized
tilt  w_k exp(m psi0).  The tilt can concentrate far from the origin when
m (b - t) |kappa - x| is large; each target column is therefore integrated
in Laplace-recentered coordinates: a short Newton run locates the mode z*
of  -z^2/2 + m Phi(b, x + s z)  (concave since Phi is concave), the nodes
are mapped through z = z* + h y with h^2 the inverse curvature at the
mode, and the exact Jacobian factor is absorbed into the log weights.

Outside the spatial grid the solution is continued analytically: the
spatial derivatives by the inverse-Mills closed form with variance
lambda(t) (which matches the exact gradient lower bound (kappa-x)/lambda
as x -> -inf and the exact tail form for t >= q_bar), and the value by
quadratic Taylor extrapolation from the nearer grid edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .fop import Fop, lambda_of, q_bar
from .gaussian import QuadratureRule, _default_rule, log_gauss_tail, mills, mills_deriv

__all__ = [
    "PdeGridSpec",
    "PdeSolution",
    "PdeBoundError",
    "grid_for",
    "terminal_condition",
    "eval_closed_tail",
    "solve",
    "residual_grid",
]

# treat pieces with smaller levels as driftless heat propagation
_M_TINY = 1e-9


class PdeBoundError(RuntimeError):
    """A rigorous bound on the solution failed beyond tolerance.

    Carries the worst offending grid point for diagnosis.
    """

    def __init__(self, what: str, t: float, x: float, value: float, bound: float):
        self.what, self.t, self.x, self.value, self.bound = what, t, x, value, bound
        super().__init__(
            f"{what} violated at (t={t:.6g}, x={x:.6g}): value={value:.6e}, bound={bound:.6e}"
        )


@dataclass(frozen=True)
class PdeGridSpec:
    """Spatial truncation and time levels for one PDE solve.

    t_nodes must contain every order-parameter breakpoint up to q_bar
    (exactly), refined so that no gap exceeds the requested resolution.
    """

    x_min: float
    x_max: float
    nx: int
    t_nodes: tuple[float, ...]

    def __post_init__(self):
        if not (self.x_min < self.x_max):
            raise ValueError("x_min must be below x_max")
        if self.nx < 16:
            raise ValueError("nx too small")
        t = np.asarray(self.t_nodes)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0:
            raise ValueError("t_nodes must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("t_nodes must be strictly increasing")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def validate_for(self, gamma: Fop, kappa: float):
        qb = q_bar(gamma)
        if abs(self.t_nodes[-1] - qb) > 1e-12:
            raise ValueError("t_nodes must end exactly at q_bar(gamma)")
        if self.x_min >= kappa - 8.0 * math.sqrt(1.0 - qb):
            raise ValueError("x_min does not cover the drifted range")
        if self.x_max <= kappa + 8.0 + 8.0 * abs(kappa):
            raise ValueError("x_max does not cover the drifted range")
        t = np.asarray(self.t_nodes)
        for b in gamma.breakpoints:
            if b <= qb + 1e-12 and not np.any(t == b):
                raise ValueError(f"breakpoint {b} missing from t_nodes")

    def to_json_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "nx": self.nx,
            "t_nodes": list(self.t_nodes),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PdeGridSpec":
        return cls(d["x_min"], d["x_max"], int(d["nx"]), tuple(d["t_nodes"]))


def grid_for(gamma: Fop, kappa: float, nx: int = 2049, dt_max: float | None = 1e-3,
             x_min: float | None = None, x_max: float | None = None) -> PdeGridSpec:
    """Default grid: x covers kappa +- the drifted-path range, time levels
    hit every breakpoint exactly and are refined to spacing <= dt_max.

    dt_max=None keeps only the breakpoints (plus 0): the backward recursion
    is exact in time within each piece, so this suffices for evaluating
    Phi(0, .) alone; interpolated access at interior times needs refinement.
    """
    qb = q_bar(gamma)
    if x_min is None:
        x_min = kappa - 12.0
    if x_max is None:
        x_max = max(kappa + 12.0 + 6.0 * max(1.0, abs(kappa)),
                    kappa + 8.5 + 8.0 * abs(kappa))
    cuts = [0.0] + [b for b in gamma.breakpoints if b < qb - 1e-15] + [qb]
    nodes = [0.0]
    for a, b in zip(cuts, cuts[1:]):
        k = 1 if dt_max is None else max(1, int(math.ceil((b - a) / dt_max - 1e-12)))
        nodes.extend(np.linspace(a, b, k + 1)[1:])
    spec = PdeGridSpec(x_min, x_max, nx, tuple(nodes))
    spec.validate_for(gamma, kappa)
    return spec


def terminal_condition(kappa: float, qbar: float, x):
    """Phi(q_bar, x) = log P(Z >= (kappa - x)/sqrt(1 - q_bar))."""
    if qbar >= 1.0:
        raise ValueError("q_bar must be < 1")
    return log_gauss_tail((kappa - np.asarray(x, dtype=float)) / math.sqrt(1.0 - qbar))


def eval_closed_tail(kappa: float, t: float, x, deriv_order: int = 0):
    """Phi and spatial derivatives on [q_bar, 1) where gamma = 1.

    order 0: log P(Z >= u), u = (kappa-x)/sqrt(1-t)
    order 1: A(u)/sqrt(1-t)
    order 2: -A'(u)/(1-t)
    order 3: A''(u)/(1-t)^(3/2)
    """
    if t >= 1.0:
        raise ValueError("closed tail form requires t < 1")
    s = math.sqrt(1.0 - t)
    u = (kappa - np.asarray(x, dtype=float)) / s
    if deriv_order == 0:
        return log_gauss_tail(u)
    if deriv_order == 1:
        return mills(u) / s
    if deriv_order == 2:
        return -mills_deriv(u, 1) / (s * s)
    if deriv_order == 3:
        return mills_deriv(u, 2) / (s * s * s)
    raise ValueError("deriv_order must be 0..3")


class _Row:
    """Evaluator of one time level (value + 3 derivatives) at arbitrary x.

    Inside the grid: cubic splines of the stored arrays.  Outside:
    inverse-Mills continuation with variance lam for the derivatives and
    quadratic Taylor from the nearer edge for the value.  The terminal row
    uses the exact closed forms everywhere.
    """

    def __init__(self, kappa: float, lam: float, x: np.ndarray | None = None,
                 rows: tuple[np.ndarray, ...] | None = None):
        self.kappa = kappa
        self.lam = lam
        self.sq = math.sqrt(lam)
        if x is None:
            self.spline = None
        else:
            self.x0, self.x1 = x[0], x[-1]
            # one 4-column spline: shared bisection, one evaluation pass
            self.spline = CubicSpline(x, np.column_stack(rows))
            self.edge_lo = (rows[0][0], rows[1][0], rows[2][0])
            self.edge_hi = (rows[0][-1], rows[1][-1], rows[2][-1])

    def _tail(self, k: int, xq: np.ndarray) -> np.ndarray:
        u = (self.kappa - xq) / self.sq
        if k == 1:
            return mills(u) / self.sq
        if k == 2:
            return -mills_deriv(u, 1) / self.lam
        if k == 3:
            return mills_deriv(u, 2) / (self.lam * self.sq)
        # k == 0: terminal row only (exact there)
        return log_gauss_tail(u)

    def _taylor(self, xq: np.ndarray, out: np.ndarray, lo, hi):
        for mask, xe, (p, d1, d2) in ((lo, self.x0, self.edge_lo),
                                      (hi, self.x1, self.edge_hi)):
            if np.any(mask):
                dx = xq[mask] - xe
                out[mask] = p + d1 * dx + 0.5 * d2 * dx * dx

    def psi_all(self, xq: np.ndarray) -> np.ndarray:
        """(4, *xq.shape) array of value and derivatives at xq."""
        if self.spline is None:
            return np.stack([self._tail(k, xq) for k in range(4)])
        vals = self.spline(np.clip(xq, self.x0, self.x1))
        out = np.moveaxis(vals, -1, 0).copy()
        lo = xq < self.x0
        hi = xq > self.x1
        if np.any(lo) or np.any(hi):
            self._taylor(xq, out[0], lo, hi)
            mask = lo | hi
            for k in (1, 2, 3):
                out[k][mask] = self._tail(k, xq[mask])
        return out

    def psi(self, k: int, xq: np.ndarray) -> np.ndarray:
        if self.spline is None:
            return self._tail(k, xq)
        out = self.spline(np.clip(xq, self.x0, self.x1))[..., k].copy()
        lo = xq < self.x0
        hi = xq > self.x1
        if np.any(lo) or np.any(hi):
            if k == 0:
                self._taylor(xq, out, lo, hi)
            else:
                mask = lo | hi
                out[mask] = self._tail(k, xq[mask])
        return out


def _pieces_below(gamma: Fop, qb: float):
    """(t_start, t_end, level) for the constant pieces covering [0, q_bar]."""
    edges = (0.0,) + gamma.breakpoints
    out = []
    for i, m in enumerate(gamma.levels):
        a, b = edges[i], edges[i + 1]
        if a < qb - 1e-15:
            out.append((a, min(b, qb), m))
    return out


@dataclass
class PdeSolution:
    """Phi and its first three spatial derivatives on the (t, x) grid."""

    grid: PdeGridSpec
    gamma: Fop
    kappa: float
    phi: np.ndarray
    dphi: np.ndarray
    d2phi: np.ndarray
    d3phi: np.ndarray
    _rows: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def q_bar(self) -> float:
        return self.grid.t_nodes[-1]

    def _row(self, j: int) -> _Row:
        if j not in self._rows:
            lam = lambda_of(self.gamma, self.grid.t_nodes[j])
            self._rows[j] = _Row(
                self.kappa, lam, self.grid.x,
                (self.phi[j], self.dphi[j], self.d2phi[j], self.d3phi[j]),
            )
        return self._rows[j]

    def eval(self, deriv_order: int, t: float, x):
        """Interpolated access: cubic in x, linear blend between the two
        bracketing time levels; analytic continuation beyond the x-grid."""
        if not 0 <= deriv_order <= 3:
            raise ValueError("deriv_order must be 0..3")
        tn = np.asarray(self.grid.t_nodes)
        if t > tn[-1] + 1e-12:
            raise ValueError("t beyond q_bar: use eval_closed_tail")
        if t < 0.0:
            raise ValueError("t must be >= 0")
        t = min(t, tn[-1])
        xq = np.asarray(x, dtype=float)
        scalar = xq.ndim == 0
        xq = np.atleast_1d(xq)
        j = int(np.searchsorted(tn, t, side="right")) - 1
        j = min(max(j, 0), len(tn) - 1)
        if j == len(tn) - 1 or abs(tn[j] - t) < 1e-14:
            out = self._row(j).psi(deriv_order, xq)
        else:
            w = (t - tn[j]) / (tn[j + 1] - tn[j])
            out = ((1.0 - w) * self._row(j).psi(deriv_order, xq)
                   + w * self._row(j + 1).psi(deriv_order, xq))
        return float(out[0]) if scalar else out

    def check_bounds(self, tol: float = 1e-6, d3_ceiling: float = 1e4):
        """Assert the rigorous bounds at every grid point (PdeBoundError)."""
        tn = np.asarray(self.grid.t_nodes)
        x = self.grid.x
        qb = tn[-1]

        def worst(excess: np.ndarray, what: str, values: np.ndarray, bounds):
            i = np.unravel_index(int(np.argmax(excess)), excess.shape)
            b = bounds[i] if isinstance(bounds, np.ndarray) else bounds
            raise PdeBoundError(what, float(tn[i[0]]), float(x[i[1]]),
                                float(values[i]), float(b))

        if np.any(~np.isfinite(self.phi)) or np.any(~np.isfinite(self.dphi)) \
                or np.any(~np.isfinite(self.d2phi)) or np.any(~np.isfinite(self.d3phi)):
            raise PdeBoundError("finiteness", math.nan, math.nan, math.nan, math.nan)

        ex = self.phi - tol
        if np.any(ex > 0):
            worst(ex, "phi <= 0", self.phi, 0.0)
        lam = np.array([lambda_of(self.gamma, float(t)) for t in tn])
        lower = np.maximum(0.0, (self.kappa - x[None, :]) / lam[:, None])
        ex = lower - self.dphi - tol
        if np.any(ex > 0):
            worst(ex, "dphi >= (kappa-x)/lambda v 0", self.dphi, lower)
        ex = self.d2phi - tol
        if np.any(ex > 0):
            worst(ex, "d2phi <= 0", self.d2phi, 0.0)
        floor = -1.0 / (1.0 - qb)
        ex = floor - self.d2phi - tol
        if np.any(ex > 0):
            worst(ex, "d2phi >= -1/(1-q_bar)", self.d2phi, floor)
        ex = np.abs(self.d3phi) - d3_ceiling
        if np.any(ex > 0):
            worst(ex, "|d3phi| ceiling", self.d3phi, d3_ceiling)


def _propagate_level(row: _Row, x: np.ndarray, s: float, m: float,
                     rule: QuadratureRule, newton_iters: int = 3):
    """One Cole-Hopf evaluation: piece-end row -> (phi, dphi, d2phi, d3phi)
    at time t = b - s^2 for every target x."""
    y = rule.nodes
    logw = np.log(rule.weights)

    if m < _M_TINY:
        xq = x[:, None] + s * y[None, :]
        w = rule.weights
        p0, p1, p2, p3 = row.psi_all(xq)
        return p0 @ w, np.maximum(p1 @ w, 0.0), p2 @ w, p3 @ w

    # Laplace recentering: mode of -z^2/2 + m psi0(x + s z), curvature h
    z = np.zeros_like(x)
    denom = np.ones_like(x)
    for _ in range(newton_iters):
        xp = x + s * z
        _, g1, g2, _ = row.psi_all(xp)
        denom = 1.0 + m * s * s * np.maximum(-g2, 0.0)
        z = z + (m * s * g1 - z) / denom
    h = 1.0 / np.sqrt(denom)

    zq = z[:, None] + h[:, None] * y[None, :]
    xq = x[:, None] + s * zq
    p0, p1, p2, p3 = row.psi_all(xq)
    expo = logw[None, :] + m * p0 - 0.5 * zq * zq + 0.5 * y[None, :] ** 2
    c = expo.max(axis=1)
    tw = np.exp(expo - c[:, None])
    norm = tw.sum(axis=1)
    tw /= norm[:, None]
    phi = (np.log(norm) + c + np.log(h)) / m
    mu1 = np.einsum("ij,ij->i", tw, p1)
    mu2 = np.einsum("ij,ij->i", tw, p2)
    mu3 = np.einsum("ij,ij->i", tw, p3)
    c1 = p1 - mu1[:, None]
    var1 = np.einsum("ij,ij->i", tw, c1 * c1)
    cov12 = np.einsum("ij,ij->i", tw, c1 * (p2 - mu2[:, None]))
    k3 = np.einsum("ij,ij->i", tw, c1 * c1 * c1)

    # dphi > 0 holds exactly (tilted average of positive values); negatives
    # can only be roundoff of underflowed tail ordinates
    dphi = np.maximum(mu1, 0.0)
    d2phi = mu2 + m * var1
    d3phi = mu3 + 3.0 * m * cov12 + m * m * k3
    return phi, dphi, d2phi, d3phi


def solve(gamma: Fop, kappa: float, spec: PdeGridSpec | None = None,
          rule: QuadratureRule | None = None, check: bool = True,
          bound_tol: float = 1e-6) -> PdeSolution:
    """Fill the full (t, x) arrays backward from the terminal condition."""
    if spec is None:
        spec = grid_for(gamma, kappa)
    spec.validate_for(gamma, kappa)
    rule = rule or _default_rule()
    tn = np.asarray(spec.t_nodes)
    x = spec.x
    nt = len(tn)
    qb = tn[-1]

    phi = np.empty((nt, len(x)))
    dphi = np.empty_like(phi)
    d2phi = np.empty_like(phi)
    d3phi = np.empty_like(phi)

    term = _Row(kappa, 1.0 - qb)
    phi[-1] = term.psi(0, x)
    dphi[-1] = term.psi(1, x)
    d2phi[-1] = term.psi(2, x)
    d3phi[-1] = term.psi(3, x)

    for a, b, m in reversed(_pieces_below(gamma, qb)):
        j_end = int(np.searchsorted(tn, b))
        if abs(tn[j_end] - b) > 1e-12:
            raise ValueError("piece end missing from t_nodes")
        if j_end == nt - 1:
            row = term
        else:
            lam_b = lambda_of(gamma, b)
            row = _Row(kappa, lam_b, x,
                       (phi[j_end], dphi[j_end], d2phi[j_end], d3phi[j_end]))
        j = j_end - 1
        while j >= 0 and tn[j] >= a - 1e-12:
            s = math.sqrt(b - tn[j])
            phi[j], dphi[j], d2phi[j], d3phi[j] = _propagate_level(row, x, s, m, rule)
            j -= 1

    if np.any(~np.isfinite(phi)):
        raise FloatingPointError("quadrature overflow in Cole-Hopf recursion")

    sol = PdeSolution(spec, gamma, kappa, phi, dphi, d2phi, d3phi)
    if check:
        sol.check_bounds(tol=bound_tol)
    return sol


def residual_grid(sol: PdeSolution, x_halfwidth: float = 6.0) -> float:
    """Max |dPhi/dt + (gamma dPhi^2 + d2Phi)/2| over interior grid points.

    The time derivative is a centered finite difference across the
    neighboring levels of the same constant piece (fourth-order stencil:
    the value grows quadratically in x, so deep in the window the third
    time derivative is large and a second-order stencil would measure its
    own truncation rather than the solution).  Rows adjacent to piece
    boundaries are skipped, and x is restricted to a window around kappa
    where the solution is consumed downstream.
    """
    tn = np.asarray(sol.grid.t_nodes)
    x = sol.grid.x
    cols = np.abs(x - sol.kappa) <= x_halfwidth
    worst = 0.0
    for a, b, m in _pieces_below(sol.gamma, sol.q_bar):
        inside = np.where((tn >= a - 1e-12) & (tn <= b + 1e-12))[0]
        for j in inside[2:-2]:
            h1 = tn[j] - tn[j - 1]
            if abs(tn[j + 1] - tn[j] - h1) > 1e-12 or abs(tn[j] - tn[j - 2] - 2 * h1) > 1e-12 \
                    or abs(tn[j + 2] - tn[j] - 2 * h1) > 1e-12:
                continue  # non-uniform neighborhood
            ddt = (-sol.phi[j + 2, cols] + 8.0 * sol.phi[j + 1, cols]
                   - 8.0 * sol.phi[j - 1, cols] + sol.phi[j - 2, cols]) / (12.0 * h1)
            res = ddt + 0.5 * (m * sol.dphi[j, cols] ** 2 + sol.d2phi[j, cols])
            worst = max(worst, float(np.max(np.abs(res))))
    return worst

"""Stage III: Euclidean projection onto the constraint polytope + rescaling.

The projection  argmin { |sigma - u| : A sigma >= kappa 1 }  (A = G/sqrt(N))
is solved through its dual, a bound-constrained concave quadratic

    max_{lam >= 0}  lam . (kappa 1 - A u) - |A^T lam|^2 / 2,

by accelerated projected gradient with step 1/L, L = s_max(A)^2 from power
iteration, and gradient-based restarts.  The primal is recovered as
sigma* = u + A^T lam, which satisfies the stationarity condition exactly;
the reported KKT residual is the larger of primal infeasibility and
complementarity (margin units of A, i.e. per row of G scaled by sqrt(N)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .amp import Disorder

__all__ = [
    "ProjectionResult",
    "RoundingReport",
    "project_polytope",
    "rescale_to_sphere",
    "verify_solution",
    "smin_check",
    "power_smax_sq",
]


@dataclass
class ProjectionResult:
    sigma_star: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    duality_gap: float
    converged: bool
    iterations: int


@dataclass
class RoundingReport:
    min_margin: float
    n_violations: int
    violation_l2: float      # |(kappa 1 - A sigma)_+|_2 / sqrt(N)
    norm_ratio: float        # |sigma| / sqrt(qbar N)

    def to_json_dict(self) -> dict:
        return {
            "min_margin": self.min_margin,
            "n_violations": self.n_violations,
            "violation_l2": self.violation_l2,
            "norm_ratio": self.norm_ratio,
        }


def power_smax_sq(dis: Disorder, iters: int = 80) -> float:
    """Largest eigenvalue of A^T A by power iteration (deterministic start)."""
    x = np.ones(dis.n) / math.sqrt(dis.n)
    lam = 1.0
    for _ in range(iters):
        y = dis.rmatvec(dis.matvec(x))
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
    return lam


def _kkt(dis: Disorder, u, lam, kappa):
    sigma = u + dis.rmatvec(lam)
    margins = dis.matvec(sigma)
    slack = margins - kappa
    pv = float(max(0.0, -slack.min()))
    comp = float(np.max(np.abs(lam * slack)))
    primal = 0.5 * float(np.dot(sigma - u, sigma - u))
    dual = float(np.dot(lam, kappa - dis.matvec(u))) - 0.5 * float(
        np.dot(sigma - u, sigma - u))
    return sigma, max(pv, comp), primal - dual


def project_polytope(dis: Disorder, u: np.ndarray, kappa: float,
                     tol: float = 1e-8, max_iter: int = 50_000,
                     check_every: int = 25) -> ProjectionResult:
    """Dual accelerated projected gradient; stops at KKT residual <= tol."""
    au = dis.matvec(u)
    c = kappa - au
    if c.max() <= 0.0:  # already feasible: the projection is u itself
        lam = np.zeros(dis.m)
        return ProjectionResult(u.copy(), lam, 0.0, 0.0, True, 0)
    if kappa >= 0.0:
        raise ValueError("projection requires kappa < 0 (strictly feasible origin) "
                         "or an already feasible point")

    L = power_smax_sq(dis)
    lam = np.zeros(dis.m)
    y = lam.copy()
    t_acc = 1.0
    kkt = math.inf
    gap = math.inf
    sigma = u.copy()
    it = 0
    for it in range(1, max_iter + 1):
        grad = dis.matvec(dis.rmatvec(y)) - c
        lam_new = np.maximum(y - grad / L, 0.0)
        if float(np.dot(y - lam_new, lam_new - lam)) > 0.0:
            t_acc = 1.0  # gradient restart
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
        y = lam_new + ((t_acc - 1.0) / t_new) * (lam_new - lam)
        lam = lam_new
        t_acc = t_new
        if it % check_every == 0 or it == max_iter:
            sigma, kkt, gap = _kkt(dis, u, lam, kappa)
            if kkt <= tol:
                return ProjectionResult(sigma, lam, kkt, gap, True, it)
    sigma, kkt, gap = _kkt(dis, u, lam, kappa)
    return ProjectionResult(sigma, lam, kkt, gap, kkt <= tol, it)


def rescale_to_sphere(sigma_star: np.ndarray, qbar: float, n: int) -> np.ndarray:
    """Scale to exact norm sqrt(qbar n), preserving direction."""
    nrm = float(np.linalg.norm(sigma_star))
    if nrm == 0.0:
        raise ValueError("cannot rescale the zero vector")
    return sigma_star * (math.sqrt(qbar * n) / nrm)


def verify_solution(dis: Disorder, sigma_hat: np.ndarray, kappa: float,
                    qbar: float, margin_tol: float = 1e-9) -> RoundingReport:
    margins = dis.matvec(sigma_hat)
    deficit = np.maximum(kappa - margins, 0.0)
    nrm = float(np.linalg.norm(sigma_hat))
    return RoundingReport(
        min_margin=float(margins.min()) if dis.m else 0.0,
        n_violations=int(np.sum(margins < kappa - margin_tol)),
        violation_l2=float(np.linalg.norm(deficit)) / math.sqrt(dis.n),
        norm_ratio=nrm / math.sqrt(qbar * dis.n),
    )


def smin_check(dis: Disorder) -> tuple[float, bool]:
    """s_min(G)^2 / N via the smaller Gram matrix; random matrix theory puts
    it at (sqrt(alpha) - 1)^2.  Returns (value, near_bulk_edge_warning)."""
    alpha = dis.m / dis.n
    warn = abs(alpha - 1.0) < 0.05
    if dis.m >= dis.n:
        gram = np.zeros((dis.n, dis.n))
        for b in range(dis.n_blocks):
            blk = dis.row_block(b)
            gram += blk.T @ blk
    else:
        g = dis.row_block(0) if dis.n_blocks == 1 else np.vstack(
            [dis.row_block(b) for b in range(dis.n_blocks)])
        gram = g @ g.T
    gram /= dis.n
    lam_min = float(scipy.linalg.eigh(gram, subset_by_index=[0, 0],
                                      eigvals_only=True)[0])
    return lam_min, warn

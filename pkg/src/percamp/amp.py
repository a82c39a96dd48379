"""Disorder generation and the two message-passing stages.

The disorder matrix G (M x N standard Gaussians, M = floor(alpha N)) is
generated in fixed row blocks from Philox streams keyed (seed, "disorder",
block): entry values depend only on the seed and the block geometry, never
on thread count or storage mode.  Small instances live in RAM; large ones
are written once to a disk-backed memmap and streamed through the matvec
kernels block by block in a fixed order.

Stage I (replica-symmetric message passing) iterates

    u^{l+1} = A^T f(v^l) - b_l u^l,      v^l = A u^l - f(v^{l-1}),
    f(x) = lambda(qu) dPhi(qu, x),       b_l = (1/N) sum_k f'(v_k^l),

from u^0 = sqrt(qu/N) 1.  Stage II (incremental message passing) drives the
per-constraint cavity field x_k and magnetization m_k

    x^{j+1} = x^j + b(q_j, x^j) delta + (v^{j+1} - v^j)
    m^{j+1} = m^j + a_j(x^j) (v^{j+1} - v^j)

with a_j the normalized lambda d2Phi and b the drift gamma dPhi, starting
from m at stage handoff = (1 + eps0) f(v).  The memory (Onsager)
coefficients b_{l,s} = (1/N) sum_k dm_k^l / dv_k^s are accumulated by the
exact chain rule through both recursions, propagating dx^j/dv^s alongside
the iterates (a finite-difference oracle cross-checks them in the tests).
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fop import Fop, gamma_at, lambda_of, q_bar, q_under
from .pde import PdeSolution
from .state_evolution import Schedule, mc_mean_sigma
from .streams import rng_for

__all__ = [
    "Disorder",
    "AmpTrace",
    "generate_disorder",
    "rs_amp",
    "iamp",
    "empirical_se_check",
]

BLOCK_BYTES = 64 * 1024 * 1024
DENSE_BYTES_DEFAULT = 1_500_000_000
MEMORY_CAP_DEFAULT = 8_000_000_000
DISK_CAP_DEFAULT = 64_000_000_000


@dataclass
class Disorder:
    """M x N Gaussian disorder with A = G / sqrt(N) matvec kernels."""

    n: int
    m: int
    seed: int
    storage: str                    # "dense" | "memmap"
    _g: np.ndarray = field(repr=False)
    entry_mean: float = 0.0
    entry_var: float = 1.0
    path: str | None = None

    @property
    def rows_per_block(self) -> int:
        return max(1, BLOCK_BYTES // (8 * self.n))

    @property
    def n_blocks(self) -> int:
        return (self.m + self.rows_per_block - 1) // self.rows_per_block

    def block_rows(self, b: int) -> tuple[int, int]:
        r0 = b * self.rows_per_block
        return r0, min(r0 + self.rows_per_block, self.m)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """A x = G x / sqrt(N)."""
        if self.storage == "dense":
            return (self._g @ x) / math.sqrt(self.n)
        out = np.empty(self.m)
        for b in range(self.n_blocks):
            r0, r1 = self.block_rows(b)
            out[r0:r1] = self._g[r0:r1] @ x
        return out / math.sqrt(self.n)

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        """A^T y = G^T y / sqrt(N)."""
        if self.storage == "dense":
            return (self._g.T @ y) / math.sqrt(self.n)
        out = np.zeros(self.n)
        for b in range(self.n_blocks):
            r0, r1 = self.block_rows(b)
            out += self._g[r0:r1].T @ y
        return out / math.sqrt(self.n)

    def row_block(self, b: int) -> np.ndarray:
        r0, r1 = self.block_rows(b)
        return np.asarray(self._g[r0:r1])


def generate_disorder(n: int, alpha: float, seed: int,
                      storage: str | None = None,
                      dense_bytes: int = DENSE_BYTES_DEFAULT,
                      memory_cap: int = MEMORY_CAP_DEFAULT,
                      disk_cap: int = DISK_CAP_DEFAULT,
                      workdir: str | None = None) -> Disorder:
    """Deterministic disorder: block b holds Philox(seed, "disorder", b) draws."""
    if n < 1 or alpha <= 0:
        raise ValueError("need n >= 1 and alpha > 0")
    m = int(math.floor(alpha * n))
    if m < 1:
        raise ValueError("alpha n must be at least 1")
    nbytes = 8 * m * n
    if storage is None:
        storage = "dense" if nbytes <= dense_bytes else "memmap"
    if storage == "dense" and nbytes > memory_cap:
        raise MemoryError(f"disorder needs {nbytes} bytes dense, beyond the configured cap")
    if storage == "memmap" and nbytes > disk_cap:
        raise MemoryError(f"disorder needs {nbytes} bytes on disk, beyond the configured cap")

    path = None
    if storage == "dense":
        g = np.empty((m, n))
    elif storage == "memmap":
        d = Path(workdir) if workdir else Path(tempfile.gettempdir())
        d.mkdir(parents=True, exist_ok=True)
        path = str(d / f"disorder-n{n}-m{m}-seed{seed}.f64")
        g = np.memmap(path, dtype="<f8", mode="w+", shape=(m, n))
    else:
        raise ValueError("storage must be 'dense' or 'memmap'")

    rows_per_block = max(1, BLOCK_BYTES // (8 * n))
    total = 0.0
    total_sq = 0.0
    for b in range((m + rows_per_block - 1) // rows_per_block):
        r0 = b * rows_per_block
        r1 = min(r0 + rows_per_block, m)
        block = rng_for(seed, "disorder", b).standard_normal((r1 - r0, n))
        g[r0:r1] = block
        total += float(block.sum())
        total_sq += float((block * block).sum())
    if storage == "memmap":
        g.flush()

    cnt = m * n
    mean = total / cnt
    var = total_sq / cnt - mean * mean
    if abs(mean) > 4.0 / math.sqrt(cnt) or abs(var - 1.0) > 4.0 * math.sqrt(2.0 / cnt):
        raise RuntimeError(f"disorder sanity bound failed: mean={mean:.3e}, var={var:.6f}")
    return Disorder(n=n, m=m, seed=seed, storage=storage, _g=g,
                    entry_mean=mean, entry_var=var, path=path)


@dataclass
class AmpTrace:
    """Iterate histories of the two stages (stage II appends in place)."""

    u_hist: list[np.ndarray]
    v_hist: list[np.ndarray]
    x_hist: list[np.ndarray]
    m_hist: list[np.ndarray]
    onsager: list[dict[int, float]]
    ell_under: int | None = None
    q_levels: np.ndarray | None = None

    @property
    def final_u(self) -> np.ndarray:
        return self.u_hist[-1]

    def check_dims(self, dis: Disorder):
        if any(u.shape != (dis.n,) for u in self.u_hist):
            raise ValueError("u history dimension mismatch")
        if any(v.shape != (dis.m,) for v in self.v_hist):
            raise ValueError("v history dimension mismatch")


def _f_rs(sol: PdeSolution, gamma: Fop, x: np.ndarray, order: int = 1) -> np.ndarray:
    qu = q_under(gamma)
    return lambda_of(gamma, qu) * sol.eval(order, qu, x)


def _check_norm(u: np.ndarray, n: int, label: str):
    if not np.all(np.isfinite(u)) or float(u @ u) > 100.0 * n:
        raise FloatingPointError(f"message passing diverged at {label}")


def rs_amp(dis: Disorder, sol: PdeSolution, gamma: Fop, ell_under: int,
           track_tol: float | None = None) -> AmpTrace:
    """Stage I from the deterministic initialization at radius sqrt(qu N):
    every coordinate sqrt(qu), so the empirical second moment is qu and
    v^0 = A u^0 has N(0, qu) entries.

    On the full-RSB set the root is marginally stable, so imperfections in
    the order parameter get amplified geometrically along the iteration.
    With track_tol set, the run is cut at the last iterate whose empirical
    second moment stays within track_tol (relative) of qu; the returned
    trace then carries the achieved iteration count in ell_under.
    """
    if ell_under < 1:
        raise ValueError("need at least one iteration")
    qu = q_under(gamma)
    u = math.sqrt(qu) * np.ones(dis.n)
    v = dis.matvec(u)
    u_hist, v_hist = [u], [v]
    onsager: list[dict[int, float]] = []
    for ell in range(ell_under):
        fv = _f_rs(sol, gamma, v_hist[ell])
        b_l = float(_f_rs(sol, gamma, v_hist[ell], order=2).sum()) / dis.n
        u_next = dis.rmatvec(fv) - b_l * u_hist[ell]
        _check_norm(u_next, dis.n, f"u^{ell + 1}")
        if track_tol is not None and abs(float(u_next @ u_next) / dis.n / qu - 1.0) > track_tol:
            if ell == 0:
                raise FloatingPointError("stage one left the root band immediately")
            break
        v_next = dis.matvec(u_next) - fv
        u_hist.append(u_next)
        v_hist.append(v_next)
        onsager.append({ell: b_l})
    return AmpTrace(u_hist=u_hist, v_hist=v_hist, x_hist=[], m_hist=[],
                    onsager=onsager, ell_under=len(u_hist) - 1)


def iamp(dis: Disorder, sol: PdeSolution, gamma: Fop, schedule: Schedule,
         rs_trace: AmpTrace, alpha: float | None = None) -> AmpTrace:
    """Stage II: incremental message passing out to the right support end."""
    ell_under = schedule.ell_under
    if rs_trace.ell_under != ell_under or len(rs_trace.u_hist) != ell_under + 1:
        raise ValueError("stage-one trace does not match the schedule")
    if abs(schedule.q_bar - q_bar(gamma)) > 1e-12:
        raise ValueError("schedule was built for a different q_bar")
    if alpha is None:
        alpha = dis.m / dis.n
    delta = schedule.delta
    eps0 = schedule.eps0
    q_levels = schedule.q_levels
    n_steps = len(q_levels) - 1

    u_hist = list(rs_trace.u_hist)
    v_hist = list(rs_trace.v_hist)
    onsager = list(rs_trace.onsager)

    v = v_hist[ell_under]
    x_cav = v.copy()
    m_mag = (1.0 + eps0) * _f_rs(sol, gamma, v)
    x_hist, m_hist = [x_cav.copy()], [m_mag.copy()]

    # dm^l/dv^s and dx^j/dv^s, keyed by the history index s
    D = {ell_under: (1.0 + eps0) * _f_rs(sol, gamma, v, order=2)}
    J = {ell_under: np.ones(dis.m)}

    for step in range(n_steps):
        j = ell_under + step
        qj = float(q_levels[step])
        # Onsager row for the update u^{j+1}
        b_row = {s: float(D[s].sum()) / dis.n for s in D}
        onsager.append(b_row)
        u_next = dis.rmatvec(m_mag)
        for s, b in b_row.items():
            u_next -= b * u_hist[s]
        _check_norm(u_next, dis.n, f"u^{j + 1}")
        v_next = dis.matvec(u_next) - m_mag
        u_hist.append(u_next)
        v_hist.append(v_next)
        dv = v_next - v

        a_norm = lambda_of(gamma, qj) * sol.eval(2, qj, x_cav) \
            / math.sqrt(alpha * schedule.normalizers[step])
        da_norm = lambda_of(gamma, qj) * sol.eval(3, qj, x_cav) \
            / math.sqrt(alpha * schedule.normalizers[step])
        g_level = gamma_at(gamma, qj)
        drift = g_level * sol.eval(1, qj, x_cav)
        ddrift = g_level * sol.eval(2, qj, x_cav)

        m_mag = m_mag + a_norm * dv
        for s in D:
            D[s] = D[s] + da_norm * J[s] * dv
        D[j] = D[j] - a_norm
        D[j + 1] = a_norm.copy()

        growth = 1.0 + delta * ddrift
        for s in J:
            J[s] = growth * J[s]
        J[j] = J[j] - 1.0
        J[j + 1] = np.ones(dis.m)
        x_cav = x_cav + drift * delta + dv

        v = v_next
        x_hist.append(x_cav.copy())
        m_hist.append(m_mag.copy())

    return AmpTrace(u_hist=u_hist, v_hist=v_hist, x_hist=x_hist, m_hist=m_hist,
                    onsager=onsager, ell_under=ell_under, q_levels=q_levels.copy())


_DEFAULT_PSI = {
    "identity": lambda x, kappa: x,
    "square": lambda x, kappa: x * x,
    "margin_deficit": lambda x, kappa: np.maximum(kappa - x, 0.0),
    "margin_deficit_sq": lambda x, kappa: np.maximum(kappa - x, 0.0) ** 2,
}


def empirical_se_check(trace: AmpTrace, dis: Disorder, sol: PdeSolution,
                       gamma: Fop, kappa: float, paths, psi_set=None) -> list[dict]:
    """Empirical <psi(A u)> against the state-evolution prediction
    E psi(X_q + lambda(q) dPhi(q, X_q)) on the simulated diffusion at the
    final incremental level q."""
    psi_set = psi_set or _DEFAULT_PSI
    q = float(trace.q_levels[-1]) if trace.q_levels is not None else q_under(gamma)
    au = dis.matvec(trace.final_u)
    xq = paths.column(q)
    margin = xq + lambda_of(gamma, q) * sol.eval(1, q, xq)
    rows = []
    for name, psi in psi_set.items():
        emp = float(np.mean(psi(au, kappa)))
        pred, sig = mc_mean_sigma(psi(margin, kappa), paths.antithetic)
        rows.append({
            "psi": name,
            "empirical": emp,
            "predicted": pred,
            "gap": emp - pred,
            "mc_sigma": sig,
        })
    return rows

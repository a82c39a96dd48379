"""End-to-end orchestration: config, staged run directory, reports.

A run executes: variational solve (or oracle order parameter from file) ->
PDE solve (disk cached) -> stage-one message passing -> schedule + SDE
diagnostics -> incremental message passing -> projection + rescaling.
Every stage artifact lands in the run directory (config.json, gamma.json,
pde.cache, se.json, amp.json/amp.bin, round.json/round.bin, report.json),
each independently re-runnable.  All randomness derives from the single
seed through labeled substreams ("optimizer", "disorder", "sde").

The exit contract evaluates the main guarantee on the stage-two output u:

    | |u| / sqrt(qbar N) - 1 | <= epsilon     and
    | (kappa 1 - A u)_+ |_2 / sqrt(N) <= epsilon.

Stage one runs under the tracked policy by default: the root of the
stage-one iteration is marginally stable on the full-RSB set, so the
iteration is cut when the iterate norm leaves a control band around the
root radius; requested and achieved counts are both reported.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .amp import AmpTrace, empirical_se_check, generate_disorder, iamp, rs_amp
from .container import cached_solve, write_arrays
from .fop import Fop, q_bar, q_under
from .pde import grid_for
from .rounding import project_polytope, rescale_to_sphere, verify_solution
from .state_evolution import build_schedule, simulate_sde, stationarity_residuals
from .streams import label_entropy
from .variational import minimize, tune_q_under

__all__ = ["ModelParams", "PipelineReport", "run_pipeline", "rs_capacity_scan"]

CONFIG_SCHEMA = "percamp-config-v1"


def _seed_for(seed: int, label: str) -> int:
    return (int(seed) ^ label_entropy(label)) & 0x7FFFFFFFFFFFFFFF


@dataclass
class ModelParams:
    """One problem instance plus all solver knobs (strict JSON round trip)."""

    kappa: float
    alpha: float
    n: int
    seed: int
    ell_under: int = 12
    pieces: int = 12
    epsilon: float = 0.05
    pde_nx: int = 2049
    pde_dt_max: float = 1e-3
    sde_paths: int = 200_000
    sde_dt: float = 1e-3
    budget: int = 400
    stage1_policy: str = "tracked"  # "tracked" | "requested"
    track_tol: float = 0.05
    tune: bool = True
    rounding_tol: float = 1e-8
    rounding_max_iter: int = 50_000

    def __post_init__(self):
        if self.alpha <= 0 or self.n < 1:
            raise ValueError("need alpha > 0 and n >= 1")
        if int(self.alpha * self.n) < 1:
            raise ValueError("alpha n must be at least 1")
        if self.stage1_policy not in ("tracked", "requested"):
            raise ValueError("stage1_policy must be 'tracked' or 'requested'")
        for name in ("epsilon", "track_tol", "rounding_tol", "pde_dt_max", "sde_dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json_dict(self) -> dict:
        d = {"schema": CONFIG_SCHEMA}
        d.update({k: getattr(self, k) for k in self.__dataclass_fields__})
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelParams":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema: {schema!r}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineReport:
    params: ModelParams
    variational: dict
    schedule: dict
    se_checks: dict
    amp_summary: dict
    rounding: dict
    contract: dict
    wall_times: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "params": self.params.to_json_dict(),
            "variational": self.variational,
            "schedule": self.schedule,
            "se_checks": self.se_checks,
            "amp_summary": self.amp_summary,
            "rounding": self.rounding,
            "contract": self.contract,
            "wall_times": self.wall_times,
            "versions": self.versions,
        }

    @property
    def contract_met(self) -> bool:
        return bool(self.contract.get("met", False))


def _dump(path: Path, obj: dict):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _trace_summary(trace: AmpTrace, n: int) -> dict:
    return {
        "ell_under": trace.ell_under,
        "n_iterates": len(trace.u_hist),
        "u_norm_sq_over_n": [float(u @ u) / n for u in trace.u_hist],
        "q_levels": trace.q_levels.tolist() if trace.q_levels is not None else None,
    }


def run_pipeline(params: ModelParams, out_dir, gamma_file=None,
                 store_traces: bool = True) -> PipelineReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", params.to_json_dict())
    walls: dict[str, float] = {}
    alpha, kappa = params.alpha, params.kappa

    # stage 0: the order parameter
    t0 = time.time()
    if gamma_file is not None:
        gamma = Fop.from_json_dict(json.loads(Path(gamma_file).read_text())["gamma"])
        variational = {"gamma_source": "oracle-supplied", "gamma_file": str(gamma_file)}
    else:
        vres = minimize(alpha, kappa, n_pieces=params.pieces, budget=params.budget,
                        seed=_seed_for(params.seed, "optimizer"))
        if not vres.feasible:
            raise RuntimeError("alpha beyond the replica-symmetric capacity: value is -inf")
        gamma = vres.gamma_star
        variational = vres.summary()
    if params.tune:
        gamma = tune_q_under(gamma, kappa, alpha, nx=params.pde_nx)
        variational["tuned_q_under"] = q_under(gamma)
    variational["gamma"] = gamma.to_json_dict()
    _dump(out / "gamma.json", {"gamma": gamma.to_json_dict()})
    walls["variational"] = time.time() - t0
    qu, qb = q_under(gamma), q_bar(gamma)

    # stage 1: PDE solve (cached)
    t0 = time.time()
    spec = grid_for(gamma, kappa, nx=params.pde_nx, dt_max=params.pde_dt_max)
    sol = cached_solve(out, gamma, kappa, spec)
    walls["pde"] = time.time() - t0

    # stage 2: disorder + stage-one message passing
    t0 = time.time()
    dis = generate_disorder(params.n, alpha, _seed_for(params.seed, "disorder"),
                            workdir=str(out))
    track = params.track_tol if params.stage1_policy == "tracked" else None
    rs_trace = rs_amp(dis, sol, gamma, params.ell_under, track_tol=track)
    ell_eff = rs_trace.ell_under
    walls["rs_amp"] = time.time() - t0

    # stage 3: schedule + diagnostics on the diffusion
    t0 = time.time()
    sched = build_schedule(gamma, sol, alpha, ell_eff,
                           n_paths=params.sde_paths, dt=params.sde_dt,
                           seed=_seed_for(params.seed, "sde"))
    paths = simulate_sde(gamma, sol, n_paths=params.sde_paths, dt=params.sde_dt,
                         seed=_seed_for(params.seed, "sde"),
                         store_times=sched.q_levels, t_end=float(sched.q_levels[-1]))
    resid = stationarity_residuals(gamma, sol, alpha, paths)
    r1m, r2m = resid.max_abs()
    se_report = {
        "schedule": sched.to_json_dict(),
        "residual_t": resid.t.tolist(),
        "r1": resid.r1.tolist(),
        "r2": resid.r2.tolist(),
        "sigma1": resid.sigma1.tolist(),
        "sigma2": resid.sigma2.tolist(),
        "q0_residual": resid.q0_residual,
        "max_abs_r1": r1m,
        "max_abs_r2": r2m,
    }
    _dump(out / "se.json", se_report)
    walls["state_evolution"] = time.time() - t0

    # stage 4: incremental message passing
    t0 = time.time()
    trace = iamp(dis, sol, gamma, sched, rs_trace, alpha=alpha)
    se_checks = empirical_se_check(trace, dis, sol, gamma, kappa, paths)
    amp_summary = {
        "requested_ell_under": params.ell_under,
        "achieved_ell_under": ell_eff,
        "stage1_policy": params.stage1_policy,
        "trace": _trace_summary(trace, dis.n),
        "se_checks": se_checks,
    }
    _dump(out / "amp.json", amp_summary)
    if store_traces:
        write_arrays(out / "amp.bin",
                     {"kind": "amp-trace", "params": params.to_json_dict(),
                      "ell_under": ell_eff},
                     {"u_hist": np.stack(trace.u_hist),
                      "v_hist": np.stack(trace.v_hist),
                      "x_hist": np.stack(trace.x_hist) if trace.x_hist else np.zeros((0, dis.m)),
                      "m_hist": np.stack(trace.m_hist) if trace.m_hist else np.zeros((0, dis.m)),
                      "q_levels": sched.q_levels})
    walls["iamp"] = time.time() - t0

    # stage 5: rounding
    t0 = time.time()
    u_fin = trace.final_u
    proj = project_polytope(dis, u_fin, kappa, tol=params.rounding_tol,
                            max_iter=params.rounding_max_iter)
    sigma_hat = rescale_to_sphere(proj.sigma_star, qb, dis.n)
    rep = verify_solution(dis, sigma_hat, kappa, qb)
    eps3 = abs(float(np.linalg.norm(proj.sigma_star)) / math.sqrt(qb * dis.n) - 1.0)
    rounding = {
        "kkt_residual": proj.kkt_residual,
        "duality_gap": proj.duality_gap,
        "iterations": proj.iterations,
        "converged": proj.converged,
        "eps3": eps3,
        "required_margin": kappa / (1.0 - eps3) if eps3 < 1.0 else -math.inf,
        "report": rep.to_json_dict(),
    }
    _dump(out / "round.json", rounding)
    if store_traces:
        write_arrays(out / "round.bin",
                     {"kind": "rounded-solution", "params": params.to_json_dict()},
                     {"sigma_star": proj.sigma_star, "sigma_hat": sigma_hat,
                      "multipliers": proj.multipliers, "u_final": u_fin})
    walls["rounding"] = time.time() - t0

    # the main guarantee, evaluated on the stage-two output
    au = dis.matvec(u_fin)
    norm_ratio_dev = abs(float(np.linalg.norm(u_fin)) / math.sqrt(qb * dis.n) - 1.0)
    violation = float(np.linalg.norm(np.maximum(kappa - au, 0.0))) / math.sqrt(dis.n)
    contract = {
        "epsilon": params.epsilon,
        "norm_ratio_deviation": norm_ratio_dev,
        "violation_l2": violation,
        "met": bool(norm_ratio_dev <= params.epsilon and violation <= params.epsilon),
        "q_under": qu,
        "q_bar": qb,
    }

    report = PipelineReport(
        params=params, variational=variational,
        schedule=se_report["schedule"], se_checks={
            "max_abs_r1": r1m, "max_abs_r2": r2m,
            "q0_residual": resid.q0_residual, "psi_checks": se_checks},
        amp_summary=amp_summary, rounding=rounding, contract=contract,
        wall_times=walls, versions={"percamp": __version__, "report": 1},
    )
    _dump(out / "report.json", report.to_json_dict())
    return report


def rs_capacity_scan(kappa_grid, alpha: float | None = None) -> list[dict]:
    """(kappa, capacity, optional RS value/overlap at a reference alpha) rows."""
    from .gaussian import gardner_rs, rs_capacity

    rows = []
    for kappa in kappa_grid:
        row = {"kappa": float(kappa), "alpha_rs": rs_capacity(float(kappa))}
        if alpha is not None:
            value, q = gardner_rs(alpha, float(kappa))
            row["rs_value"] = value
            row["rs_q"] = q
        rows.append(row)
    return rows

"""Command-line entry points.

Subcommands: parisi-solve, se-diagnose, amp-run, round, pipeline, rs-scan.
Global flags --seed/--threads/--out-dir; PERCAMP_CACHE_DIR selects the PDE
cache location.  Exit codes: 0 when the run contract is met, 2 when a
pipeline finishes but misses its contract, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="percamp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread cap (set before numpy loads)")
    p.add_argument("--out-dir", default="percamp-run")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("parisi-solve", help="minimize the variational functional")
    ps.add_argument("--alpha", type=float, required=True)
    ps.add_argument("--kappa", type=float, required=True)
    ps.add_argument("--pieces", type=int, default=12)
    ps.add_argument("--budget", type=int, default=400)
    ps.add_argument("--out", default=None, help="report JSON path")

    se = sub.add_parser("se-diagnose", help="schedule constants + stationarity residuals")
    se.add_argument("--alpha", type=float, required=True)
    se.add_argument("--kappa", type=float, required=True)
    se.add_argument("--gamma-file", required=True)
    se.add_argument("--ell-under", type=int, default=12)
    se.add_argument("--paths", type=int, default=100_000)
    se.add_argument("--dt", type=float, default=1e-3)
    se.add_argument("--nx", type=int, default=1025)
    se.add_argument("--out", default=None)

    am = sub.add_parser("amp-run", help="two-stage message passing")
    am.add_argument("--alpha", type=float, required=True)
    am.add_argument("--kappa", type=float, required=True)
    am.add_argument("--n", type=int, required=True)
    am.add_argument("--ell-under", type=int, default=12)
    am.add_argument("--gamma-file", required=True)
    am.add_argument("--nx", type=int, default=1025)
    am.add_argument("--trace-bin", action="store_true", help="also write the full trace container")
    am.add_argument("--out", default=None)

    ro = sub.add_parser("round", help="project onto the polytope and rescale")
    ro.add_argument("--in", dest="infile", required=True,
                    help="amp trace container (.bin) or JSON with a 'u' vector")
    ro.add_argument("--alpha", type=float, default=None)
    ro.add_argument("--kappa", type=float, default=None)
    ro.add_argument("--n", type=int, default=None)
    ro.add_argument("--disorder-seed", type=int, default=None)
    ro.add_argument("--qbar", type=float, required=True)
    ro.add_argument("--tol", type=float, default=1e-8)
    ro.add_argument("--out", default=None)

    pl = sub.add_parser("pipeline", help="full run, all stages")
    pl.add_argument("--config", default=None, help="config.json (overrides flags)")
    pl.add_argument("--alpha", type=float, default=None)
    pl.add_argument("--kappa", type=float, default=None)
    pl.add_argument("--n", type=int, default=None)
    pl.add_argument("--ell-under", type=int, default=12)
    pl.add_argument("--pieces", type=int, default=12)
    pl.add_argument("--epsilon", type=float, default=0.05)
    pl.add_argument("--gamma-file", default=None)

    rs = sub.add_parser("rs-scan", help="replica-symmetric capacity table (CSV)")
    rs.add_argument("--kappa-min", type=float, required=True)
    rs.add_argument("--kappa-max", type=float, required=True)
    rs.add_argument("--points", type=int, default=21)
    rs.add_argument("--alpha", type=float, default=None)
    rs.add_argument("--out", default=None, help="CSV path (default stdout)")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _dispatch(args)
    except (ValueError, RuntimeError, OSError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _load_gamma(path):
    from .fop import Fop

    payload = json.loads(Path(path).read_text())
    return Fop.from_json_dict(payload["gamma"] if "gamma" in payload else payload)


def _write_or_print(out, payload: dict):
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _dispatch(args) -> int:
    cache_dir = os.environ.get("PERCAMP_CACHE_DIR", args.out_dir)

    if args.command == "parisi-solve":
        from .variational import minimize

        res = minimize(args.alpha, args.kappa, n_pieces=args.pieces,
                       budget=args.budget, seed=args.seed)
        _write_or_print(args.out, res.summary())
        return 0

    if args.command == "se-diagnose":
        from .container import cached_solve
        from .pde import grid_for
        from .state_evolution import build_schedule, simulate_sde, stationarity_residuals

        gamma = _load_gamma(args.gamma_file)
        spec = grid_for(gamma, args.kappa, nx=args.nx)
        sol = cached_solve(cache_dir, gamma, args.kappa, spec)
        sched = build_schedule(gamma, sol, args.alpha, args.ell_under,
                               n_paths=args.paths, dt=args.dt, seed=args.seed)
        paths = simulate_sde(gamma, sol, n_paths=args.paths, dt=args.dt,
                             seed=args.seed, store_times=sched.q_levels,
                             t_end=float(sched.q_levels[-1]))
        rr = stationarity_residuals(gamma, sol, args.alpha, paths)
        _write_or_print(args.out, {
            "schedule": sched.to_json_dict(),
            "residual_t": rr.t.tolist(), "r1": rr.r1.tolist(), "r2": rr.r2.tolist(),
            "sigma1": rr.sigma1.tolist(), "sigma2": rr.sigma2.tolist(),
            "q0_residual": rr.q0_residual,
        })
        return 0

    if args.command == "amp-run":
        import numpy as np

        from .amp import generate_disorder, iamp, rs_amp
        from .container import cached_solve, write_arrays
        from .pde import grid_for
        from .state_evolution import build_schedule

        gamma = _load_gamma(args.gamma_file)
        spec = grid_for(gamma, args.kappa, nx=args.nx)
        sol = cached_solve(cache_dir, gamma, args.kappa, spec)
        dis = generate_disorder(args.n, args.alpha, args.seed)
        rs_trace = rs_amp(dis, sol, gamma, args.ell_under, track_tol=0.05)
        sched = build_schedule(gamma, sol, args.alpha, rs_trace.ell_under, seed=args.seed)
        trace = iamp(dis, sol, gamma, sched, rs_trace, alpha=args.alpha)
        summary = {
            "requested_ell_under": args.ell_under,
            "achieved_ell_under": rs_trace.ell_under,
            "u_norm_sq_over_n": [float(u @ u) / dis.n for u in trace.u_hist],
            "q_levels": sched.q_levels.tolist(),
        }
        _write_or_print(args.out, summary)
        if args.trace_bin:
            binpath = Path(args.out or "amp.json").with_suffix(".bin")
            write_arrays(binpath, {"kind": "amp-trace", "n": dis.n, "m": dis.m,
                                   "alpha": args.alpha, "kappa": args.kappa,
                                   "seed": args.seed, "qbar": sched.q_bar},
                         {"u_hist": np.stack(trace.u_hist),
                          "v_hist": np.stack(trace.v_hist),
                          "q_levels": sched.q_levels})
        return 0

    if args.command == "round":
        import numpy as np

        from .amp import generate_disorder
        from .container import read_arrays
        from .rounding import project_polytope, rescale_to_sphere, verify_solution

        infile = Path(args.infile)
        if infile.suffix == ".bin":
            meta, arrays = read_arrays(infile)
            u = arrays["u_hist"][-1] if "u_hist" in arrays else arrays["u_final"]
            n = int(meta.get("n", len(u)))
            alpha = args.alpha if args.alpha is not None else float(meta["alpha"])
            kappa = args.kappa if args.kappa is not None else float(meta["kappa"])
            seed = args.disorder_seed if args.disorder_seed is not None else int(meta["seed"])
        else:
            payload = json.loads(infile.read_text())
            u = np.asarray(payload["u"], dtype=float)
            n, alpha, kappa = args.n or len(u), args.alpha, args.kappa
            seed = args.disorder_seed if args.disorder_seed is not None else args.seed
            if alpha is None or kappa is None:
                raise ValueError("--alpha and --kappa are required with a JSON vector")
        dis = generate_disorder(n, alpha, seed)
        proj = project_polytope(dis, u, kappa, tol=args.tol)
        sigma_hat = rescale_to_sphere(proj.sigma_star, args.qbar, n)
        rep = verify_solution(dis, sigma_hat, kappa, args.qbar)
        _write_or_print(args.out, {
            "kkt_residual": proj.kkt_residual,
            "duality_gap": proj.duality_gap,
            "iterations": proj.iterations,
            "converged": proj.converged,
            "report": rep.to_json_dict(),
        })
        return 0

    if args.command == "pipeline":
        from .pipeline import ModelParams, run_pipeline

        if args.config:
            params = ModelParams.from_json_dict(json.loads(Path(args.config).read_text()))
        else:
            if args.alpha is None or args.kappa is None or args.n is None:
                raise ValueError("pipeline needs --config or --alpha/--kappa/--n")
            params = ModelParams(kappa=args.kappa, alpha=args.alpha, n=args.n,
                                 seed=args.seed, ell_under=args.ell_under,
                                 pieces=args.pieces, epsilon=args.epsilon)
        report = run_pipeline(params, args.out_dir, gamma_file=args.gamma_file)
        print(json.dumps(report.contract, sort_keys=True, indent=1))
        return 0 if report.contract_met else 2

    if args.command == "rs-scan":
        import numpy as np

        from .pipeline import rs_capacity_scan

        grid = np.linspace(args.kappa_min, args.kappa_max, args.points)
        rows = rs_capacity_scan(grid, alpha=args.alpha)
        cols = list(rows[0].keys())
        lines = [",".join(cols)]
        lines += [",".join(repr(r[c]) for c in cols) for r in rows]
        text = "\n".join(lines)
        if args.out:
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
        return 0

    raise ValueError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())

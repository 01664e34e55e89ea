"""Command-line interface: JSON config in, CSV artifacts out.

Exit codes: 0 success, 1 configuration or validation error, 2 solver
non-convergence or an acceptance-invariant violation under --check.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costs
from .boundary import ConvergenceError, SolverConfig, solve_boundary, uniqueness_probe
from .control import (
    CoverageError,
    MCConfig,
    build_surface,
    default_z_grid,
    report_to_csv,
    simulate_control,
    verify_theorem,
)
from .model import ProblemSpec, benchmark, spec_from_dict, validate
from .oracle import (
    compare_stopping_boundary,
    lattice_for,
    stopping_value_iteration,
)
from .value import MCConfig


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _spec_from_config(cfg: dict) -> ProblemSpec:
    if "problem" in cfg:
        return spec_from_dict(cfg["problem"])
    return benchmark()


def _solver_config(cfg: dict) -> SolverConfig:
    base = SolverConfig()
    sec = {**cfg.get("quadrature", {}), **cfg.get("solver", {})}
    fields = {f: sec[f] for f in sec if hasattr(base, f)}
    return SolverConfig(**{**base.__dict__, **fields}) if fields else base


def _mc_config(cfg: dict, seed=None) -> MCConfig:
    sec = dict(cfg.get("mc", {}))
    if seed is not None:
        sec["seed"] = seed
    allowed = {k: sec[k] for k in sec if k in ("paths", "dt", "horizon", "seed", "batch")}
    return MCConfig(**allowed)


def _threads(args) -> int:
    if args.threads:
        return args.threads
    env = os.environ.get("FREEBOUND_THREADS")
    return int(env) if env else 1


def _check_spec(spec: ProblemSpec, force: bool) -> int:
    rep = validate(spec)
    if not rep.all_pass and not force:
        for c in rep.failed():
            print(f"assumption failed: {c.name}: {c.detail}", file=sys.stderr)
        return 1
    return 0


def cmd_solve_boundary(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    scfg = _solver_config(cfg)
    try:
        bnd = solve_boundary(spec, args.z, scfg)
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) / f"boundary_z{args.z:g}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    bnd.to_csv(out)
    print(f"boundary z={args.z:g}: flag={bnd.flag} x_star={bnd.x_star:.6g} "
          f"x_sup={bnd.x_sup:.6g} residual_sup={bnd.residual_sup:.3e} "
          f"(tol_boundary={scfg.tol_boundary:g}, tol_residual={scfg.tol_residual:g}) "
          f"-> {out}")
    if args.check and bnd.flag == "converged" and bnd.residual_sup > scfg.tol_residual:
        return 2
    return 0


def _build_surface_from_cfg(cfg, spec, args):
    scfg = SolverConfig.fast()
    sec = cfg.get("solver", {})
    zsec = cfg.get("surface", {})
    zg = default_z_grid(zsec.get("z_min", 0.4), zsec.get("z_max", 6000.0),
                        zsec.get("n_z", 40))
    return build_surface(spec, zg, scfg, threads=_threads(args))


def cmd_surface(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    try:
        surf = _build_surface_from_cfg(cfg, spec, args)
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) / "surface.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    surf.to_csv(out)
    print(f"surface: {len(surf.z_grid)} slices on z in "
          f"[{surf.z_grid[0]:g}, {surf.z_grid[-1]:g}] -> {out}")
    return 0


def cmd_value(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    x, y, z = (float(v) for v in args.point.split(","))
    scfg = _solver_config(cfg)
    bnd = solve_boundary(spec, z, scfg)
    from .value import ValueEvaluator
    v = float(ValueEvaluator(spec, bnd, scfg).values([x], [y])[0])
    print(f"v({x:g},{y:g};{z:g}) = {v!r}  (residual_sup={bnd.residual_sup:.2e})")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    x, y, z = (float(v) for v in args.point.split(","))
    mc = _mc_config(cfg, seed=args.seed)
    if args.paths:
        mc = MCConfig(paths=args.paths, dt=mc.dt, horizon=mc.horizon, seed=mc.seed)
    try:
        surf = _build_surface_from_cfg(cfg, spec, args)
        path = simulate_control(spec, surf, x, y, z, mc)
    except (ConvergenceError, CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) / "paths.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    path.to_csv(out)
    print(f"simulated 1 path, {len(path.times)} steps, nu_T={path.nu[-1]!r} -> {out}")
    return 0


def cmd_verify(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    x, y, z = (float(v) for v in args.point.split(","))
    mc = _mc_config(cfg, seed=args.seed)
    try:
        surf = _build_surface_from_cfg(cfg, spec, args)
        reports = verify_theorem(spec, surf, [(x, y, z)], mc)
    except (ConvergenceError, CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report_to_csv(reports, out)
    rep = reports[0]
    print(f"U={rep.U:.6g} J*={rep.J_star:.6g}+-{rep.J_star_stderr:.2g} "
          f"Vz_fd={rep.Vz_fd:.6g} v={rep.v_at_point:.6g} ks={rep.ks_statistic:.3f} -> {out}")
    if args.check:
        if rep.u_vs_j_z > 3.0 or any(v != "optimal-not-beaten" for v in rep.verdicts.values()):
            return 2
    return 0


def cmd_oracle(args) -> int:
    cfg = _load_config(args.config)
    spec = _spec_from_config(cfg)
    rc = _check_spec(spec, args.force)
    if rc:
        return rc
    scfg = _solver_config(cfg)
    try:
        bnd = solve_boundary(spec, args.z, scfg)
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 2
    osec = cfg.get("oracle", {})
    x_star = bnd.x_star
    lat = lattice_for(spec,
                      osec.get("x_range", (0.15 * x_star, 4.0 * x_star)),
                      osec.get("y_range", (0.02 * x_star,
                                           0.6 * float(bnd.envelope.eval(4.0 * x_star)))),
                      nx=osec.get("nx", 60), ny=osec.get("ny", 60),
                      dt=osec.get("dt", 0.01))
    table = stopping_value_iteration(spec, lat, args.z)
    cmpres = compare_stopping_boundary(table, bnd)
    print(f"oracle z={args.z:g}: {cmpres['agree']}/{cmpres['total']} columns within "
          f"one cell; worst gap {cmpres['worst_cells']:.2f} cells "
          f"({table.sweeps} sweeps)")
    if args.check and cmpres["agree"] < cmpres["total"]:
        return 2
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="freebound",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None, help="JSON config path")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=0,
                    help="worker processes (fallback: FREEBOUND_THREADS)")
    ap.add_argument("--check", action="store_true",
                    help="exit 2 on acceptance-invariant violations")
    ap.add_argument("--force", action="store_true",
                    help="run even if assumption validation fails")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-boundary", help="solve one stopping boundary")
    p.add_argument("--z", type=float, required=True)
    p.set_defaults(func=cmd_solve_boundary)

    p = sub.add_parser("surface", help="solve the boundary surface")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("value", help="analytic stopping value at a point")
    p.add_argument("--point", required=True, help="x,y,z")
    p.set_defaults(func=cmd_value)

    p = sub.add_parser("simulate", help="simulate one reflected-control path")
    p.add_argument("--point", required=True, help="x,y,z")
    p.add_argument("--paths", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="verification report at a point")
    p.add_argument("--point", required=True, help="x,y,z")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("oracle", help="lattice oracle comparison at one z")
    p.add_argument("--z", type=float, required=True)
    p.set_defaults(func=cmd_oracle)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``protondlra run|compare|cuts|rank-report``."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    DoseGrid,
    captured_information,
    compare_doses,
    extract_cut,
    negative_dose_stats,
    read_rank_history,
    read_raw,
    write_profile,
    write_rank_history,
    write_raw,
    write_vtk,
)
from .config import apply_overrides, build_density, build_physics, load_config
from .dlra import BugConfig
from .exceptions import AccuracyError, AssemblyError, ConfigError, DomainError, SolverError
from .solver import build_problem, energy_balance, solve_collided_fullrank, solve_collided_lowrank

log = logging.getLogger("protondlra")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _grid_arg(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must be nx,ny,nz") from None
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError("grid must be three positive integers nx,ny,nz")
    return vals


def _write_run(out: Path, report, cfg, problem, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    dose = report.dose
    if cfg.output.normalize == "per_particle":
        dose = dose.per_particle(problem.weight)
    grid = dose.grid
    write_vtk(out / "dose.vtk", grid, dose.fields())
    for name, arr in dose.fields().items():
        write_raw(out / f"dose_{name}.raw", grid, arr, name)
    write_rank_history(out / "rank_history.csv", report.ranks)
    timing = dict(report.timings)
    timing.update(
        {
            "steps": report.n_steps,
            "mean_step_seconds": float(np.mean(report.step_times)) if report.n_steps else 0.0,
            "step_seconds": [float(t) for t in report.step_times],
        }
    )
    (out / "timing.json").write_text(json.dumps(timing, indent=2))
    checks = {
        "energy_balance": energy_balance(report),
        "negative_dose": negative_dose_stats(dose),
        "rank_min": int(report.ranks.ranks.min()) if len(report.ranks) else None,
        "rank_max": int(report.ranks.ranks.max()) if len(report.ranks) else None,
        "memory_elements_peak": int(report.memory_elements),
    }
    if report.solver == "lowrank":
        ex, ev = report.final_state.orthonormality_error()
        checks["orthonormality_final"] = {"X": ex, "V": ev}
    manifest = {
        "solver": report.solver,
        "config": cfg.to_dict(),
        "versions": {
            "protondlra": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
        },
        "discretisation": {
            "cells": list(grid.shape),
            "n_moments": problem.basis.size,
            "dt": problem.dt,
            "steps": problem.n_steps,
            "t_end": problem.tmap.t_end,
        },
        "normalization_particles": problem.weight if cfg.output.normalize == "per_particle" else 1.0,
        "energy": report.energy,
        "checks": checks,
        "warnings": report.warnings,
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg = apply_overrides(
        cfg,
        solver=args.solver,
        pn=args.pn,
        theta=args.theta,
        theta_mode=args.theta_mode,
        grid=args.grid,
        out=args.out,
        threads=args.threads,
    )
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=cfg.threads):
        t0 = time.perf_counter()
        density = build_density(cfg)
        physics = build_physics(cfg)
        s = cfg.solver
        problem = build_problem(cfg.beam, density, physics, s.pn, s.n_groups, s.order, s.cfl)
        setup = time.perf_counter() - t0
        print(f"setup: {setup:.2f} s, {problem.n_steps} steps, {problem.basis.size} moments")
        kinds = ["lowrank", "fullrank"] if s.kind == "both" else [s.kind]
        out = Path(cfg.output.dir)
        reports = {}
        for kind in kinds:
            if kind == "lowrank":
                bug = BugConfig(theta=s.theta, theta_mode=s.theta_mode, r_max=s.r_max, r0=s.r0, cfl=s.cfl)
                rep = solve_collided_lowrank(problem, bug)
            else:
                rep = solve_collided_fullrank(problem, limit=s.dense_limit)
            rep.timings["setup"] = setup
            reports[kind] = rep
            _write_run(out / kind, rep, cfg, problem, {})
            for w in rep.warnings:
                print(f"warning: {w}")
            print(f"{kind}: {rep.timings['loop']:.2f} s, final rank {rep.ranks.rank[-1]}")
        if len(reports) == 2:
            cmp = compare_doses(reports["lowrank"].dose, reports["fullrank"].dose)
            (out / "comparison.json").write_text(json.dumps(cmp, indent=2))
            print(f"lowrank vs fullrank relative L2: {cmp['relative_l2']!r}")
    return EXIT_OK


def _load_dose(path: Path) -> DoseGrid:
    path = Path(path)
    if not (path / "dose_total.raw").exists():
        subs = [p for p in path.iterdir() if (p / "dose_total.raw").exists()] if path.is_dir() else []
        if len(subs) != 1:
            raise ConfigError(f"{path}: not a run directory (no dose_total.raw)")
        path = subs[0]
    grid, col, _ = read_raw(path / "dose_collided.raw")
    grid_u, unc, _ = read_raw(path / "dose_uncollided.raw")
    return DoseGrid(grid, col, unc)


def cmd_compare(args) -> int:
    a, b = _load_dose(args.run_a), _load_dose(args.run_b)
    try:
        res = compare_doses(a, b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for k, v in res.items():
        print(f"{k}: {v!r}")
    if args.out:
        Path(args.out).write_text(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_cuts(args) -> int:
    dose = _load_dose(args.run)
    coords = [float(v) for v in args.at.split(",")]
    try:
        prof = extract_cut(dose, args.kind, coords, args.field)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.out:
        write_profile(args.out, prof)
    else:
        if prof.values.ndim == 1:
            for c, v in zip(prof.coords[0], prof.values):
                print(f"{float(c)!r} {float(v)!r}")
        else:
            print(f"2D cut over {prof.axes}: shape {prof.values.shape}; use --out to write it")
    return EXIT_OK


def cmd_rank_report(args) -> int:
    path = Path(args.run)
    csv_path = path / "rank_history.csv"
    if not csv_path.exists():
        subs = list(path.glob("*/rank_history.csv"))
        if len(subs) != 1:
            raise ConfigError(f"{path}: no rank_history.csv")
        csv_path = subs[0]
    h = read_rank_history(csv_path)
    r = h.ranks
    i = int(np.argmax(r))
    print(f"steps: {len(h)}")
    print(f"rank min/max/final: {r.min()} / {r.max()} / {r[-1]}")
    print(f"max rank at step {h.steps[i]} (E = {h.energy[i]!r} MeV)")
    sig = h.sigma[len(h) // 2]
    if sig.size:
        k = min(args.k, sig.size)
        print(f"mid-run captured information, top {k}: {captured_information(sig, k)!r} %")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="protondlra", description="Low-rank proton dose calculation")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="trace the beam and solve the collided equation")
    r.add_argument("--config", required=True, help="TOML file or preset name")
    r.add_argument("--solver", choices=["lowrank", "fullrank", "both"])
    r.add_argument("--pn", type=int)
    r.add_argument("--theta", type=float)
    r.add_argument("--theta-mode", choices=["abs", "rel"])
    r.add_argument("--grid", type=_grid_arg, help="nx,ny,nz")
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare the total dose of two runs")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("cuts", help="extract a dose profile")
    k.add_argument("run")
    k.add_argument("--kind", choices=["longitudinal", "lateral"], default="longitudinal")
    k.add_argument("--at", required=True, help="coordinates in cm, e.g. 1,1")
    k.add_argument("--field", choices=["total", "collided", "uncollided"], default="total")
    k.add_argument("--out")
    k.set_defaults(func=cmd_cuts)

    h = sub.add_parser("rank-report", help="summarise the rank history of a run")
    h.add_argument("run")
    h.add_argument("--k", type=int, default=10)
    h.set_defaults(func=cmd_rank_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, AssemblyError, AccuracyError, DomainError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

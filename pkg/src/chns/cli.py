"""Command-line front end: simulate, equilibrate, verify, rate-fit.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as chio
from .config import ConfigError, build_initial_state, dump_config, load_config
from .diagnostics import Recorder, fit_convergence_rate
from .evolution import SeparationError, SimState, run
from .grid import ScalarField, VectorField

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(report, obj: dict) -> None:
    line = json.dumps(obj, sort_keys=True)
    print(line)
    if report is not None:
        report.write(line + "\n")


def _out_dir(cfg, override: str | None) -> Path:
    out = Path(override) if override else cfg.path("run.output_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    (out / "config.normalized.cfg").write_text(dump_config(cfg), encoding="utf-8")
    state = build_initial_state(cfg)
    stepper = cfg.stepper
    every_csv = cfg["run.csv_every"]
    every_snap = cfg["run.snapshot_every"]
    every_ckpt = cfg["run.checkpoint_every"]
    recorder = Recorder(cfg.params, cfg.potential, every=every_csv)
    recorder.record(state)
    chio.write_vtk_snapshot(state, out / f"snapshot_{state.step:07d}.vtk")
    snapshots = 1

    def outputs(s: SimState) -> None:
        nonlocal snapshots
        if s.step % every_snap == 0:
            chio.write_vtk_snapshot(s, out / f"snapshot_{s.step:07d}.vtk")
            snapshots += 1
        if s.step % every_ckpt == 0:
            chio.save_checkpoint(s, out / "checkpoint.chns")

    t0 = time.perf_counter()
    status = EXIT_OK
    error = None
    final = state
    try:
        final = run(state, stepper, t_end=cfg["run.t_end"], callbacks=[recorder, outputs])
    except SeparationError as exc:
        status, error = EXIT_FAIL, str(exc)
    chio.write_timeseries_csv(recorder.records, out / "timeseries.csv")
    chio.save_checkpoint(final, out / "checkpoint.chns")
    last = recorder.records[-1]
    with open(out / "report.jsonl", "w", encoding="utf-8") as rep:
        _emit(rep, {"command": "simulate", "steps": final.step, "t": final.t, "E_total": last.E_total,
                    "separation": last.separation, "clip_events": final.clip_events,
                    "snapshots": snapshots, "ok": status == EXIT_OK, "error": error})
    manifest = {"config": str(Path(args.config).resolve()), "wall_time_s": time.perf_counter() - t0,
                "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return status


def cmd_equilibrate(args) -> int:
    from .stationary import cho_flow, minimize_energy, reduced_equilibrium

    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    params, pot = cfg.params, cfg.potential
    state = build_initial_state(cfg)
    tol = cfg["equilibrate.tol"]
    method = cfg["equilibrate.method"]
    m1 = float(state.phi.values.mean())
    m2 = float(state.sigma.values.mean())
    flow_kw = dict(gamma=cfg["equilibrate.gamma"], dt=cfg["equilibrate.dt"], tol=tol,
                   max_steps=cfg["equilibrate.max_steps"])
    cands = None
    if method == "cho_flow":
        res = cho_flow(state.phi, state.sigma, params, pot, **flow_kw)
    elif method == "reduced":
        res = reduced_equilibrium(state.phi, m1, m2, params, pot, tol=tol)
    else:
        mres = minimize_energy(state.grid, m1, m2, params, pot, n_starts=cfg["equilibrate.n_starts"],
                               seed=cfg["equilibrate.seed"], **flow_kw)
        res, cands = mres.best, mres.candidates
    grid = state.grid
    eq_state = SimState(v=VectorField.zeros(grid), p=ScalarField.constant(grid, 0.0), phi=res.phi_inf,
                        mu=ScalarField.constant(grid, 0.0), sigma=res.sigma_inf)
    from .evolution import chemical_potential
    eq_state.mu = chemical_potential(res.phi_inf, res.sigma_inf, params, pot)
    chio.write_vtk_snapshot(eq_state, out / "equilibrium.vtk")
    chio.save_checkpoint(eq_state, out / "equilibrium.chns")
    rows = cands if cands is not None else [res]
    with open(out / "candidates.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("index,energy,residual,r1,r2,separation,iterations,converged\n")
        for i, c in enumerate(rows):
            fh.write(f"{i},{c.energy:.17g},{c.residual:.17g},{c.r1:.17g},{c.r2:.17g},"
                     f"{c.separation:.17g},{c.iterations},{int(c.converged)}\n")
    with open(out / "report.jsonl", "w", encoding="utf-8") as rep:
        _emit(rep, {"command": "equilibrate", "method": method, "energy": res.energy, "residual": res.residual,
                    "r1": res.r1, "r2": res.r2, "separation": res.separation, "iterations": res.iterations,
                    "converged": res.converged})
    return EXIT_OK if res.converged else EXIT_FAIL


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    if args.suite != "all" and args.suite not in SUITES:
        print(f"unknown suite '{args.suite}'; choose from all, {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    if args.size is not None and args.size < 4:
        print("--size must be >= 4", file=sys.stderr)
        return EXIT_USAGE
    report_path = Path(args.report) if args.report else Path(f"verify_{args.suite}.jsonl")
    ok = True
    with open(report_path, "w", encoding="utf-8") as rep:
        for name in names:
            res = run_suite(name, args.size)
            for c in res.checks:
                _emit(rep, {"suite": name, **c.as_dict()})
            _emit(rep, {"suite": name, "passed": res.passed, "elapsed_s": round(res.elapsed, 3)})
            ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_rate_fit(args) -> int:
    try:
        cols = chio.read_csv_columns(args.csv)
    except (OSError, ValueError) as exc:
        print(f"cannot read {args.csv}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for c in (args.t_column, args.column):
        if c not in cols:
            print(f"column '{c}' not in {args.csv} (have {', '.join(cols)})", file=sys.stderr)
            return EXIT_USAGE
    window = tuple(args.window) if args.window else None
    try:
        fit = fit_convergence_rate(cols[args.t_column], cols[args.column], window)
    except ValueError as exc:
        print(f"rate fit failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    report_path = Path(args.report) if args.report else Path(args.csv).with_suffix(".ratefit.jsonl")
    with open(report_path, "w", encoding="utf-8") as rep:
        _emit(rep, {"kappa": float(fit.kappa), "exponent": float(fit.exponent), "r_squared": fit.r_squared,
                    "window": list(fit.window), "flagged_exponential": fit.flagged_exponential,
                    "exp_rate": float(fit.exp_rate), "n_points": fit.n_points})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chns", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", help="time-integrate a configured run")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides run.output_dir)")
    s.set_defaults(func=cmd_simulate)
    e = sub.add_parser("equilibrate", help="compute an equilibrium")
    e.add_argument("config")
    e.add_argument("--out", help="output directory (overrides run.output_dir)")
    e.set_defaults(func=cmd_equilibrate)
    v = sub.add_parser("verify", help="run an acceptance suite ('all' for every suite)")
    v.add_argument("suite")
    v.add_argument("--size", type=int, default=None, help="cells per axis")
    v.add_argument("--report", help="JSON-lines report path")
    v.set_defaults(func=cmd_verify)
    r = sub.add_parser("rate-fit", help="fit the algebraic decay rate of a CSV column")
    r.add_argument("csv")
    r.add_argument("--column", default="distance")
    r.add_argument("--t-column", default="t")
    r.add_argument("--window", type=float, nargs=2, metavar=("T0", "T1"))
    r.add_argument("--report", help="JSON-lines report path")
    r.set_defaults(func=cmd_rate_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line front end: simulation runs, benchmark matrices, scaling sweeps.

Outputs are deterministic, diffable UTF-8 CSV files (floats printed with 17
significant digits so parsing them reproduces the in-memory values exactly)
plus a JSON summary per run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import precond as pc
from .engine import (MpcConfig, SimulationFailure, Trajectory, aggregates,
                     initial_guess, simulate)
from .krylov import FdOperator

FLOAT_FMT = "%.17g"

TRAJECTORY_COLUMNS = ["step", "t", "x", "y", "u", "p",
                      "res_before", "res_after", "gmres_iters"]


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FMT % float(value)


def trajectory_rows(traj: Trajectory) -> list[dict]:
    rows = []
    stats_by_step = {s.step: s for s in traj.stats}
    for j, (t, state) in enumerate(zip(traj.times, traj.states)):
        s = stats_by_step.get(j)
        u = traj.controls[j] if j < len(traj.controls) else float("nan")
        rows.append({
            "step": j,
            "t": t,
            "x": float(state[0]),
            "y": float(state[1]),
            "u": u,
            "p": s.p if s else float("nan"),
            "res_before": s.res_before if s else float("nan"),
            "res_after": s.res_after if s else float("nan"),
            "gmres_iters": s.gmres_iters if s else 0,
        })
    return rows


def write_trajectory_csv(path: Path, traj: Trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in trajectory_rows(traj):
            writer.writerow([_fmt(row[c]) for c in TRAJECTORY_COLUMNS])


def read_trajectory_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            parsed = {c: (int(row[c]) if c in ("step", "gmres_iters")
                          else float(row[c])) for c in TRAJECTORY_COLUMNS}
            out.append(parsed)
        return out


def write_summary(path: Path, config: MpcConfig, traj: Trajectory) -> dict:
    summary = {"config": asdict(config), "aggregates": aggregates(traj, config)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def config_from_namespace(args: argparse.Namespace) -> MpcConfig:
    """Merge defaults, config-file values, then explicit flags (flags win)."""
    values: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    flag_map = {
        "model": "model", "horizon": "horizon", "steps": "steps", "dt": "dt",
        "refinements": "refinements", "shift": "shifting",
        "precond": "preconditioning", "tol": "gmres_tol",
        "fd_step": "fd_step", "x0": "x0", "xf": "xf", "wd": "wd",
        "alpha1": "alpha1", "alpha2": "alpha2", "p0": "p0",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    for key in ("shifting", "preconditioning"):
        if isinstance(values.get(key), str):
            values[key] = values[key] == "on"
    for key in ("x0", "xf"):
        if isinstance(values.get(key), str):
            values[key] = tuple(float(v) for v in values[key].split(","))
        elif isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    if str(values.get("model")) in ("1", "2"):
        values["model"] = f"model{values['model']}"
    config = MpcConfig(**values)
    if getattr(args, "dt", None) is None and "dt" not in values:
        # Default system step: spread the minimum-time guess over the steps.
        config.dt = 2.0 / max(config.steps, 1)
    return config


def _add_scenario_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=["1", "2", "model1", "model2"])
    parser.add_argument("--horizon", type=int, metavar="N")
    parser.add_argument("--steps", type=int, metavar="M")
    parser.add_argument("--dt", type=float, metavar="SEC")
    parser.add_argument("--refinements", type=int, metavar="K")
    parser.add_argument("--shift", choices=["on", "off"])
    parser.add_argument("--precond", choices=["on", "off"])
    parser.add_argument("--tol", type=float)
    parser.add_argument("--fd-step", dest="fd_step", type=float)
    parser.add_argument("--x0", metavar="A,B")
    parser.add_argument("--xf", metavar="A,B")
    parser.add_argument("--wd", type=float)
    parser.add_argument("--alpha1", type=float)
    parser.add_argument("--alpha2", type=float)
    parser.add_argument("--p0", type=float)
    parser.add_argument("--config", metavar="FILE",
                        help="JSON file mirroring the flags; flags override")
    parser.add_argument("--out", default=".", metavar="DIR")


def run_simulate(args: argparse.Namespace) -> int:
    config = config_from_namespace(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    code = 0
    try:
        traj = simulate(config)
    except SimulationFailure as exc:
        traj = exc.trajectory
        code = 1
    write_trajectory_csv(out / "trajectory.csv", traj)
    summary = write_summary(out / "summary.json", config, traj)
    agg = summary["aggregates"]
    print(f"success={agg['success']} steps={agg['steps_completed']} "
          f"avg_gmres_iters={agg['avg_gmres_iters']:.2f} "
          f"final_state_norm={agg['final_state_norm']:.3e} "
          f"reason={agg['stop_reason']}")
    return code


DEFAULT_BENCHMARK = [
    {"id": "model1-precond-on", "model": "model1", "horizon": 20,
     "steps": 500, "dt": 2.0 / 500, "refinements": 2, "preconditioning": True},
    {"id": "model1-precond-off", "model": "model1", "horizon": 20,
     "steps": 500, "dt": 2.0 / 500, "refinements": 2, "preconditioning": False},
]


def run_benchmark(args: argparse.Namespace) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            matrix = json.load(fh)["runs"]
    else:
        matrix = DEFAULT_BENCHMARK
    if len(matrix) < 2:
        print("benchmark needs at least 2 configs", file=sys.stderr)
        return 2

    rows = []
    for entry in matrix:
        entry = dict(entry)
        run_id = entry.pop("id")
        for key in ("x0", "xf"):
            if isinstance(entry.get(key), list):
                entry[key] = tuple(entry[key])
        config = MpcConfig(**entry)
        try:
            traj = simulate(config)
        except SimulationFailure as exc:
            traj = exc.trajectory
        agg = aggregates(traj, config)
        steps = max(agg["steps_completed"], 1)
        rows.append({
            "config_id": run_id,
            "success": agg["success"],
            "avg_iters": agg["avg_gmres_iters"],
            "avg_wall_ms_per_step": 1000.0 * agg["total_wall_time"] / steps,
        })
    base = rows[0]["avg_iters"]
    for row in rows:
        row["speedup"] = base / row["avg_iters"] if row["avg_iters"] > 0 else float("nan")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "benchmark.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "success", "avg_iters",
                         "avg_wall_ms_per_step", "speedup"])
        for row in rows:
            writer.writerow([row["config_id"], row["success"],
                             _fmt(row["avg_iters"]),
                             _fmt(row["avg_wall_ms_per_step"]),
                             _fmt(row["speedup"])])
    for row in rows:
        print(f"{row['config_id']}: success={row['success']} "
              f"avg_iters={row['avg_iters']:.2f} speedup={row['speedup']:.2f}")
    return 0


def measure_scaling(horizons: list[int], repeats: int = 5) -> dict:
    """Median preconditioner setup+factorize+apply time per horizon length."""
    results = []
    for N in horizons:
        config = MpcConfig(horizon=N)
        model = config.build_model()
        U = initial_guess(model, config)
        # A generic well-posed point: the cold-start guess itself sits at a
        # singular stationarity Jacobian, which the Schur guard rejects.
        tau = np.arange(N) / N
        U.u[:, 0] = 0.6 * np.cos(2.0 * np.pi * tau)
        U.ud[:, 0] = np.sqrt(1.0 - U.u[:, 0] ** 2)
        U.mu[:] = 0.1
        U.nu[:] = 0.05
        x0 = np.asarray(config.x0)
        times = []
        float_count = 0
        for _ in range(repeats):
            start = time.perf_counter()
            op = FdOperator(model, U, x0, 0.0, h=config.fd_step)
            M = pc.assemble(model, U, x0, 0.0, op)
            factors = pc.factorize(M)
            pc.apply_inverse(factors, op.base_residual)
            times.append(time.perf_counter() - start)
            float_count = factors.float_count()
        results.append({"N": N, "median_seconds": float(np.median(times)),
                        "factor_floats": float_count})
    report = {"entries": results, "slope": None}
    if len(results) >= 2:
        logs_n = np.log([r["N"] for r in results])
        logs_t = np.log([r["median_seconds"] for r in results])
        report["slope"] = float(np.polyfit(logs_n, logs_t, 1)[0])
    return report


def run_scaling(args: argparse.Namespace) -> int:
    horizons = [int(v) for v in args.horizons.split(",")]
    report = measure_scaling(horizons, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scaling.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "median_seconds", "factor_floats"])
        for row in report["entries"]:
            writer.writerow([row["N"], _fmt(row["median_seconds"]),
                             row["factor_floats"]])
    with open(out / "scaling.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    slope = report["slope"]
    print("slope=" + ("n/a" if slope is None else f"{slope:.3f}"))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nkmpc",
        description="Newton-Krylov MPC for the minimum-time double integrator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one closed-loop scenario")
    _add_scenario_flags(p_sim)
    p_sim.set_defaults(func=run_simulate)

    p_bench = sub.add_parser("benchmark", help="run a matrix of scenarios")
    p_bench.add_argument("--config", metavar="FILE",
                         help='JSON file with {"runs": [{"id": ..., ...}]}')
    p_bench.add_argument("--out", default=".", metavar="DIR")
    p_bench.set_defaults(func=run_benchmark)

    p_scale = sub.add_parser("scaling", help="preconditioner timing sweep")
    p_scale.add_argument("--horizons", default="250,500,1000,2000,4000")
    p_scale.add_argument("--repeats", type=int, default=5)
    p_scale.add_argument("--out", default=".", metavar="DIR")
    p_scale.set_defaults(func=run_scaling)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

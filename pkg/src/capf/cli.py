"""Command-line entry point.

Subcommands: ``simulate`` (closed-loop run with CSV/JSON outputs),
``collision`` (overlap test between two ellipsoid JSON files),
``sweep-lambda`` (fixed lambda-hat comparison against the two-stage
controller), ``bench`` (wall-time eCDF over repetitions), and
``validate`` (schema check of a scenario file).

Exit codes are a stable contract: simulate returns 0 on a collision-free
run, 2 if any step truly overlapped, 1 on errors; collision returns
0/3/4 for separate/touching/overlapping and 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .controller import ControlMode, TWO_STAGE
from .geometry import Classification, Ellipsoid, intersects_oracle, minimize_k
from .scenarios import ScenarioError, load_scenario, scenario_from_dict, scenario_to_dict
from . import simulator


def _add_common(parser):
    parser.add_argument("--scenario", default="demo-static",
                        help="builtin name (demo-static, demo-moving) or JSON file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--alpha", type=float, default=None, help="collision margin override")
    parser.add_argument("--epsilon", type=float, default=None, help="lambda change threshold")
    parser.add_argument("--i-max", type=int, default=None, help="two-stage iteration budget")
    parser.add_argument("--mode", default="twostage",
                        help="twostage | fixed:<lambda> | joint")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--duration", type=float, default=None, help="simulation length [s]")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capf",
        description="Ellipsoidal collision-avoidant path-following MPC simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a closed-loop simulation")
    _add_common(p_sim)

    p_col = sub.add_parser("collision", help="overlap test between two ellipsoid files")
    p_col.add_argument("ellipsoid_a")
    p_col.add_argument("ellipsoid_b")
    p_col.add_argument("--lambda-tol", type=float, default=1e-4)
    p_col.add_argument("--touch-tol", type=float, default=1e-6)

    p_sweep = sub.add_parser("sweep-lambda", help="fixed lambda-hat sweep plus two-stage baseline")
    _add_common(p_sweep)
    p_sweep.add_argument("--lambdas", default="",
                         help="comma-separated fixed lambda values, e.g. 0.5,0.8")

    p_bench = sub.add_parser("bench", help="wall-time eCDF over repetitions")
    _add_common(p_bench)
    p_bench.add_argument("--reps", type=int, default=3)

    p_val = sub.add_parser("validate", help="validate a scenario JSON file")
    p_val.add_argument("scenario_file")
    return parser


def _load(args):
    overrides = {
        "alpha": args.alpha,
        "epsilon": args.epsilon,
        "i_max": args.i_max,
        "seed": args.seed,
        "duration": args.duration,
    }
    return load_scenario(args.scenario, **overrides)


def _write_summary(out_dir, scenario, mode, log, extra=None):
    summary = simulator.metrics(log, scenario.path)
    summary["scenario"] = scenario.name
    summary["mode"] = mode.label()
    summary["effective_config"] = scenario_to_dict(scenario)
    if extra:
        summary.update(extra)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def cmd_simulate(args) -> int:
    try:
        scenario = _load(args)
        mode = ControlMode.parse(args.mode)
    except (ScenarioError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    log = simulator.run(scenario, mode)
    log.write_traces_csv(os.path.join(args.out, "traces.csv"))
    log.write_diagnostics_jsonl(os.path.join(args.out, "diagnostics.jsonl"))
    log.write_plot_bundle(os.path.join(args.out, "plots"))
    summary = _write_summary(args.out, scenario, mode, log)
    print(json.dumps({k: summary[k] for k in
                      ("scenario", "mode", "steps", "collision_free", "terminal_s",
                       "wall_p75", "wall_max", "aborted")}, indent=2))
    if log.aborted:
        print("error: controller infeasible for 10 consecutive steps", file=sys.stderr)
        return 1
    return 0 if summary["collision_free"] else 2


def cmd_collision(args) -> int:
    try:
        with open(args.ellipsoid_a) as fh:
            e_a = Ellipsoid.from_dict(json.load(fh))
        with open(args.ellipsoid_b) as fh:
            e_b = Ellipsoid.from_dict(json.load(fh))
        verdict = minimize_k(e_a, e_b, lambda_tol=args.lambda_tol, touch_tol=args.touch_tol)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(json.dumps({
        "k_min": verdict.k_min,
        "lambda_star": verdict.lambda_star,
        "classification": verdict.classification.value,
    }, indent=2))
    return {
        Classification.SEPARATE: 0,
        Classification.TOUCHING: 3,
        Classification.OVERLAPPING: 4,
    }[verdict.classification]


def cmd_sweep_lambda(args) -> int:
    values = [v for v in args.lambdas.split(",") if v.strip()]
    if not values:
        print("error: --lambdas must list at least one value", file=sys.stderr)
        return 1
    try:
        lam_values = [float(v) for v in values]
        scenario = _load(args)
    except (ScenarioError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for lam in lam_values:
        mode = ControlMode("fixed", lam)
        log = simulator.run(load_scenario(args.scenario, alpha=args.alpha, seed=args.seed,
                                          duration=args.duration, i_max=args.i_max,
                                          epsilon=args.epsilon), mode)
        m = simulator.metrics(log, scenario.path)
        rows.append((mode.label(), lam, m))
    base_log = simulator.run(scenario, TWO_STAGE)
    m = simulator.metrics(base_log, scenario.path)
    rows.append(("twostage", "", m))

    with open(os.path.join(args.out, "comparison.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "lambda_hat", "max_path_distance", "max_tracking_error",
                         "mean_cost_proxy", "collision_free", "terminal_s"])
        for label, lam, m in rows:
            writer.writerow([label, lam, m["max_path_distance"], m["max_tracking_error"],
                             m.get("mean_path_distance", ""), m["collision_free"], m["terminal_s"]])
    for label, lam, m in rows:
        print(f"{label:>12}: max path distance {m['max_path_distance']:.4f} m, "
              f"collision_free={m['collision_free']}")
    return 0


def cmd_bench(args) -> int:
    if args.reps < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return 1
    try:
        scenario = _load(args)
        mode = ControlMode.parse(args.mode)
    except (ScenarioError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    walls = []
    for rep in range(args.reps):
        log = simulator.run(scenario, mode)
        walls.append(log.wall_times)
    walls = np.concatenate(walls)
    quantiles = {
        "p50": float(np.percentile(walls, 50)),
        "p75": float(np.percentile(walls, 75)),
        "p95": float(np.percentile(walls, 95)),
        "max": float(np.max(walls)),
        "reps": args.reps,
        "delta": scenario.delta,
        "budget_ok": bool(np.max(walls) < scenario.delta),
    }
    with open(os.path.join(args.out, "bench_ecdf.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wall_time", "fraction"])
        srt = np.sort(walls)
        for i, v in enumerate(srt):
            writer.writerow([v, (i + 1) / len(srt)])
    with open(os.path.join(args.out, "bench_quantiles.json"), "w") as fh:
        json.dump(quantiles, fh, indent=2)
    print(json.dumps(quantiles, indent=2))
    if not quantiles["budget_ok"]:
        print("warn: max step time exceeded the control period", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    try:
        with open(args.scenario_file) as fh:
            data = json.load(fh)
        scenario_from_dict(data)
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ScenarioError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print("scenario valid")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "collision": cmd_collision,
        "sweep-lambda": cmd_sweep_lambda,
        "bench": cmd_bench,
        "validate": cmd_validate,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

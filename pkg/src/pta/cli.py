"""Command-line entry points: train, sweep, verify-theory, gradcheck,
export-trajectories, report-dropout."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dynamics, gradcheck
from .harness import (load_config, report_dropout_schedules, run_single, run_sweep,
                      export_trajectories, run_name)


def _print_summary_table(summary: dict) -> None:
    header = f"{'policy':10s} {'D':>3s} {'val error':>12s} {'test error':>12s} {'improve pp':>11s}"
    print(header)
    print("-" * len(header))
    for row in summary["rows"]:
        imp = row["improvement_pp"]
        print(f"{row['policy']:10s} {row['decoders']:3d} "
              f"{row['val_error']['mean']:12.4f} {row['test_error']['mean']:12.4f} "
              f"{imp if imp is None else format(imp, '11.3f')}")
    if summary["failures"]:
        print(f"{len(summary['failures'])} run(s) failed:")
        for f in summary["failures"]:
            print(f"  {f['policy']} D={f['decoders']} seed={f['seed']}: {f['error']}")


def _cmd_train(args) -> int:
    config = load_config(args.config)
    policy = args.policy or config.policies[0]
    n_decoders = args.decoders or config.decoders[0]
    seed = args.seed if args.seed is not None else config.seeds[0]
    run_dir = Path(args.out) / run_name(policy, n_decoders, seed)
    row = run_single(config, policy, n_decoders, seed, run_dir)
    print(json.dumps(row, sort_keys=True, indent=2))
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    summary = run_sweep(config, args.out, jobs=args.jobs)
    _print_summary_table(summary)
    return 1 if summary["failures"] else 0


def _cmd_verify_theory(args) -> int:
    report = dynamics.verification_report(n_instances=args.instances, seed=args.seed)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0 if report["passed"] else 1


def _cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(n_instances=args.instances, seed=args.seed,
                                     step=args.step, tolerance=args.tolerance)
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    return 0 if report.passed else 1


def _cmd_export_trajectories(args) -> int:
    count = export_trajectories(args.run, args.out)
    print(f"wrote {count} snapshot rows to {args.out}")
    return 0


def _cmd_report_dropout(args) -> int:
    report = report_dropout_schedules(args.run, window=args.window)
    if args.out:
        import csv

        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["meta_iteration", "task_id", "mean_rate", "smoothed_rate"])
            for task in report["tasks"]:
                for meta, mean, smooth in zip(report["meta_iterations"],
                                              task["mean_rates"], task["smoothed"]):
                    writer.writerow([meta, task["task_id"], repr(mean), repr(smooth)])
        print(f"wrote dropout schedules to {args.out}")
    else:
        print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pta",
        description="Multi-decoder training with decoder-control policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one (policy, D, seed) training run")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config's first seed")
    p.add_argument("--policy", default=None, help="override the config's first policy")
    p.add_argument("--decoders", type=int, default=None,
                   help="override the config's first decoder count")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run policies x decoder counts x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify-theory",
                       help="exact witness certificate plus randomized dynamics checks")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify_theory)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the backward pass")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-trajectories",
                       help="render a run's decoder snapshots as CSV")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_export_trajectories)

    p = sub.add_parser("report-dropout",
                       help="per-task mean dropout-rate schedules of a run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--window", type=int, default=10, help="moving-average window")
    p.add_argument("--out", default=None, help="optional output CSV path")
    p.set_defaults(func=_cmd_report_dropout)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: run scenarios, oracle solves, checks, linting."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import Scenario, check_dlmp_files, reference_solve, run_benchmark
from .diagnostics import write_dlmp_csv
from .grid import InstanceError, fifteen_bus, load_instance

log = logging.getLogger("dlmpsim")


def _setup_logging():
    level = os.environ.get("DLMPSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _add_common(sub):
    sub.add_argument("--instance", help="instance JSON (default: bundled benchmark)")
    sub.add_argument("--out", help="output directory")


def cmd_run(args) -> int:
    overrides = {
        "instance": args.instance, "iters": args.iters, "seed": args.seed,
        "sigma": args.sigma, "sampling": args.sampling, "out": args.out,
    }
    if args.scenario:
        scenario = Scenario.from_json(args.scenario, **overrides)
    else:
        scenario = Scenario(**{k: v for k, v in overrides.items() if v is not None})
    report = run_benchmark(scenario)
    for row in report["paper_targets"]["rows"]:
        if row["status"] == "fail":
            print(f"target bus {row['bus']} t={row['t']}: abs error "
                  f"{row['abs_err']:.4f} exceeds {report['paper_targets']['tolerance']}")
    print(f"oracle gate: deviation {report['oracle_gate']['deviation']:.2e} "
          f"({'pass' if report['oracle_gate']['passed'] else 'FAIL'})")
    print(f"benchmark {'PASSED' if report['passed'] else 'FAILED'}; "
          f"artifacts in {scenario.out or 'bench_out'}")
    return 0 if report["passed"] else 1


def cmd_oracle(args) -> int:
    instance = load_instance(args.instance) if args.instance else fifteen_bus()
    res = reference_solve(instance, tol=args.tol, sigma=args.sigma,
                          max_iters=args.iters)
    print(f"kkt residual {res.kkt:.3e} after {res.iterations} iterations "
          f"({res.seconds:.1f}s), converged={res.converged}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lay = res.problem.layout
        y_p, y_q = res.problem.dlmp(res.y)
        write_dlmp_csv(out / "dlmp_oracle.csv", lay.bus_ids, y_p, y_q)
        print(f"prices written to {out / 'dlmp_oracle.csv'}")
    return 0 if res.converged else 1


def cmd_check(args) -> int:
    result = check_dlmp_files(args.candidate, args.reference, args.tol)
    bad = [r for r in result["rows"] if r["status"] != "pass"]
    for row in bad:
        print(f"bus {row['bus']} t={row['t']}: {row['status']} "
              f"(abs error {row.get('abs_err', float('nan')):.4f})")
    print("check PASSED" if result["passed"] else "check FAILED")
    return 0 if result["passed"] else 1


def cmd_validate(args) -> int:
    try:
        instance = load_instance(args.instance) if args.instance else fifteen_bus()
    except (InstanceError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid instance: {exc}")
        return 1
    print(f"instance OK: {instance.n_buses} buses + root, T={instance.T}, "
          f"{len(instance.aggregator_ids())} aggregators")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlmpsim",
        description="Locational marginal prices on radial grids via "
                    "randomized primal-dual agents")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a benchmark scenario")
    p_run.add_argument("--scenario", help="scenario JSON file")
    _add_common(p_run)
    p_run.add_argument("--iters", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--sigma", type=float)
    p_run.add_argument("--sampling", choices=["ppdlmp", "full", "singleton"])
    p_run.set_defaults(func=cmd_run)

    p_oracle = sub.add_parser("oracle", help="deterministic reference solve")
    _add_common(p_oracle)
    p_oracle.add_argument("--tol", type=float, default=1e-7)
    p_oracle.add_argument("--sigma", type=float, default=1.0)
    p_oracle.add_argument("--iters", type=int, default=60000)
    p_oracle.set_defaults(func=cmd_oracle)

    p_check = sub.add_parser("check", help="compare two price CSV files")
    p_check.add_argument("--candidate", required=True)
    p_check.add_argument("--reference", required=True)
    p_check.add_argument("--tol", type=float, default=0.05)
    p_check.set_defaults(func=cmd_check)

    p_val = sub.add_parser("validate", help="lint an instance document")
    p_val.add_argument("--instance")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

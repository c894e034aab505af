"""Command-line front end.

Subcommands:
    run        execute a seeded training campaign from a config file
    gradcheck  finite-difference verification of every gradient block
    mmcheck    Monte-Carlo verification of the moment-matching predictions

Exit codes: 0 success, 1 invalid config, 2 runtime failure (run),
3 verification threshold breach (gradcheck / mmcheck).
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .campaign import load_experiment_config, run_campaign
from .checks import run_gradcheck, run_mmcheck
from .errors import ConfigError


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override seed_base")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--runs", type=int, default=None, help="override the run count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safepen",
        description="Safe model-based policy search with GP dynamics models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run a training campaign"))
    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p_grad)
    p_grad.add_argument(
        "--corrupt",
        type=float,
        default=0.0,
        help=argparse.SUPPRESS,  # test hook: scales analytic gradients
    )
    _add_common(sub.add_parser("mmcheck", help="Monte-Carlo moment-matching suite"))
    return parser


def cmd_run(args) -> int:
    try:
        cfg = load_experiment_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        aggregate = run_campaign(
            cfg, out_dir=args.out, runs=args.runs, seed_base=args.seed
        )
    except Exception:
        traceback.print_exc()
        print("campaign failed; partial outputs preserved", file=sys.stderr)
        return 2
    print(json.dumps(aggregate, indent=2))
    return 0


def _print_report(entries) -> bool:
    ok = True
    for e in entries:
        status = "ok  " if e.passed else "FAIL"
        print(f"[{status}] {e.block:55s} err={e.error:.3e} (tol {e.threshold:g})")
        ok = ok and e.passed
    return ok


def cmd_gradcheck(args) -> int:
    try:
        load_experiment_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    entries = run_gradcheck(corrupt_scale=args.corrupt)
    ok = _print_report(entries)
    if not ok:
        failing = [e.block for e in entries if not e.passed]
        print(f"gradient check failed: {failing}", file=sys.stderr)
        return 3
    print("all gradient blocks within tolerance")
    return 0


def cmd_mmcheck(args) -> int:
    try:
        load_experiment_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    entries = run_mmcheck()
    ok = _print_report(entries)
    if not ok:
        failing = [e.block for e in entries if not e.passed]
        print(f"moment-matching check failed: {failing}", file=sys.stderr)
        return 3
    print("all moment-matching blocks within tolerance")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    if args.command == "mmcheck":
        return cmd_mmcheck(args)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())

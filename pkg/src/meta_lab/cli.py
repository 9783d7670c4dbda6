"""Command-line entry point: ``meta-lab <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 numeric failure (non-finite state
or integral domain error), 4 integral validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from ._backend import BACKEND, KernelDomainError
from .dynamics import RhsDomainError
from .experiments import (ENV_OUT, PRESETS, ConfigError, parse_config, preset_config,
                          resolve_out_dir, run_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4
RUN_COMMANDS = ("theory", "simulate", "compare", "sweep", "validate-integrals")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meta-lab",
        description="Order-parameter theory and simulation of online first-order ANIL meta-learning.",
        epilog=f"The output directory defaults to ${ENV_OUT} when set.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=f"run a kind={name} experiment")
        src = p.add_mutually_exclusive_group(required=name != "validate-integrals")
        src.add_argument("--config", metavar="PATH", help="experiment JSON document")
        src.add_argument("--preset", metavar="NAME", help="shipped preset (see preset-list)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config and env)")
        p.add_argument("--seed", type=int, metavar="INT",
                       help="override the seed list (simulate/compare) or the validation seed")
        p.add_argument("--jobs", type=int, default=1, metavar="INT", help="worker processes (default 1)")
        if name == "validate-integrals":
            p.add_argument("--count", type=int, metavar="INT", help="covariances per kind")
            p.add_argument("--tolerance", type=float, metavar="TOL", help="max allowed |closed - oracle|")
    sub.add_parser("preset-list", help="list shipped presets")
    return parser


def _document(args) -> dict:
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    elif args.preset:
        doc = preset_config(args.preset)
    else:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    kind = doc.setdefault("kind", args.command)
    if kind != args.command:
        raise ConfigError(f"config.kind is {kind!r} but the subcommand is {args.command!r}")
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        if args.command in ("simulate", "compare"):
            doc["seeds"] = [args.seed]
        elif args.command == "validate-integrals":
            doc.setdefault("validation", {})["seed"] = args.seed
        else:
            print(f"note: --seed has no effect for kind={args.command} (deterministic)", file=sys.stderr)
    if args.command == "validate-integrals":
        val = doc.setdefault("validation", {})
        if args.count is not None:
            val["count"] = args.count
        if args.tolerance is not None:
            val["tolerance"] = args.tolerance
    return doc


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preset-list":
        width = max(map(len, PRESETS))
        for name, (description, doc) in PRESETS.items():
            print(f"{name:<{width}}  {doc['kind']:<8}  {description}")
        return EXIT_OK
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        config = parse_config(_document(args))
        out = resolve_out_dir(args.out, config.output)
        outcome = run_experiment(config, out, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot write artifacts: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RhsDomainError, KernelDomainError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {outcome.directory} (backend: {BACKEND})")
    for name in sorted(outcome.artifacts):
        print(f"  {name}")
    if outcome.summary:
        print(json.dumps(outcome.summary, indent=2, default=str))
    for w in outcome.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``saac <stage> [options]``.

Exit status is 0 on success, 1 on invalid input or configuration and 2 when
the data cannot support an estimate (unresolved county factors, infeasible or
empty IPF problems).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .calibration import UnresolvedCountyError
from .config import PipelineConfig
from .outbound import EmptyMonthError, StructuralInfeasibilityError
from .pipeline import STAGES, run

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2
INFEASIBLE = (UnresolvedCountyError, StructuralInfeasibilityError, EmptyMonthError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, help="directory for artifacts and manifest")
    common.add_argument("--input", type=Path, help="directory with input tables (default: --out)")
    common.add_argument("--seed", type=int, help="rng seed for simulate")
    common.add_argument("--ipf-tol", type=float)
    common.add_argument("--ipf-max-iter", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="saac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "evaluate":
            p.add_argument("--reference", type=Path, help="csv with cbg, daytime_ref, nighttime_ref")
    p = sub.add_parser("all", parents=[common], help="run every stage in order")
    p.add_argument("--reference", type=Path)
    p.add_argument("--skip-simulate", action="store_true", help="use existing input tables")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    data = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
    cfg = PipelineConfig.from_mapping(data)
    if args.seed is not None and args.seed < 0:
        raise ValueError("--seed must be a non-negative integer")
    cfg = cfg.with_overrides(out_dir=args.out, seed=args.seed, ipf_tol=args.ipf_tol,
                             ipf_max_iter=args.ipf_max_iter, threads=args.threads)
    if args.input is not None:
        cfg = cfg.with_overrides(input_dir=args.input)
    elif "input_dir" not in data:
        cfg = cfg.with_overrides(input_dir=cfg.out_dir)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    kw = {}
    if getattr(args, "reference", None) is not None:
        kw["reference"] = args.reference
    try:
        cfg = load_config(args)
        if args.command == "all":
            entries = run("all", cfg, simulate_inputs=not args.skip_simulate, **kw)
        else:
            entries = run(args.command, cfg, **kw)
    except INFEASIBLE as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for entry in entries:
        print(f"{entry['stage']}: ok ({entry['seconds']:.2f}s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

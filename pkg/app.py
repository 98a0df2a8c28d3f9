"""
Critical Loop-Soup Laboratory - Command Line Frontend

This module implements the command line of the laboratory: running
experiment files with checkpointing, validating them, turning record
directories into reports and printing the exact two-point and Green
function oracles.
"""

import os
import sys
import argparse
import logging
from typing import List, Optional

from config import RUN_CONFIG, load_config
from errors import ConfigValidationError, LoopLabError
from experiment_runner import run_experiment
from gff_metric_graph import arcsin_two_point
from lattice_core import build_box, green_dirichlet
from reporting import REPORT_FORMATS, emit_report, load_records

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def configure_logging(level: str) -> None:
    """Configure the root logger for the command line."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    records = run_experiment(config, progress=not args.quiet, include_timing=args.include_timing)
    print(f"{config.kind}: {len(records)} records in {config.output_dir}")
    for record in records:
        estimate = "n/a" if record.estimate is None else f"{record.estimate:.6g}"
        stderr = "n/a" if record.stderr is None else f"{record.stderr:.2g}"
        print(f"  scale {record.scale_key:>10}  {record.label:<24} {estimate} +/- {stderr}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    print(f"{args.config}: valid {config.kind} experiment, {len(config.scales)} scales, "
          f"{config.replicas} replicas")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    records = load_records(args.records_dir)
    out_dir = args.out or os.path.join(args.records_dir, RUN_CONFIG["report_dir"])
    for path in emit_report(records, args.format, out_dir, include_timing=args.include_timing):
        print(path)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    box = build_box(args.dimension, args.N)
    green = green_dirichlet(box)
    if args.oracle == "green":
        origin = (0,) * args.dimension
        print(f"G(0,0) = {green(origin, origin):.12f}")
        print(f"residual = {green.residual():.3e}")
        return EXIT_OK
    origin = (0,) * args.dimension
    print(f"# arcsin two-point table, d={args.dimension} N={args.N}")
    print("vertex\tP(0 <-> v)")
    for coords in box.coords:
        v = tuple(int(c) for c in coords)
        print(f"{','.join(str(c) for c in v)}\t{arcsin_two_point(green, origin, v):.12f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="looplab", description="Critical loop-soup Monte Carlo laboratory")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default INFO)")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    parser.add_argument("--include-timing", action="store_true", help="Keep wall times in exported records")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment file")
    run.add_argument("config", help="TOML experiment file")
    run.set_defaults(handler=cmd_run)

    validate = commands.add_parser("validate", help="Validate an experiment file")
    validate.add_argument("config", help="TOML experiment file")
    validate.set_defaults(handler=cmd_validate)

    report = commands.add_parser("report", help="Write a report of a records directory")
    report.add_argument("records_dir", help="Run directory holding records.jsonl or records.db")
    report.add_argument("--format", required=True, help="One of " + ", ".join(REPORT_FORMATS))
    report.add_argument("--out", default=None, help="Report directory (default <records-dir>/report)")
    report.set_defaults(handler=cmd_report)

    oracle = commands.add_parser("oracle", help="Print exact oracles on a Dirichlet box")
    oracle.add_argument("oracle", choices=("two-point", "green"))
    oracle.add_argument("--N", type=int, required=True, help="Box half-width")
    oracle.add_argument("--dimension", type=int, default=3, help="Lattice dimension (default 3)")
    oracle.set_defaults(handler=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line.

    Returns:
        0 on success, 2 when a config fails validation, 3 on any other error
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigValidationError as e:
        print(f"Error: {e}", file=sys.stderr)
        for message in e.errors:
            print(f"  - {message}", file=sys.stderr)
        return EXIT_VALIDATION
    except LoopLabError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point for single runs and magnet-distance sweeps.

Exit codes: 0 on full completion, 2 on configuration or validation
errors, 3 when a solver fails (partial outputs are retained).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, build_config, serialize_config
from .io import write_run_outputs, write_sweep_summary
from .scenario import run_magnet_distance_sweep, run_simulation
from .stepper import IllPosedProblemError, StepFailure

__all__ = ["main"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdtsim",
        description=("Finite element simulation of magnetically targeted "
                     "particle transport in a vessel."))
    parser.add_argument("--config", metavar="PATH",
                        help="INI config file (omitted keys take defaults)")
    parser.add_argument("--variant",
                        choices=["full", "no-fluid", "no-magnet", "reduced"],
                        help="model variant (overrides the config file)")
    parser.add_argument("--dim", type=int, choices=[2, 3],
                        help="spatial dimension (overrides the config file)")
    parser.add_argument("--refine", type=int, metavar="L",
                        help="mesh refinement level (overrides the config file)")
    parser.add_argument("--tau", type=float, metavar="T",
                        help="time step size; must divide T_end evenly")
    parser.add_argument("--sweep-distances", metavar="a,b,c",
                        help="comma-separated magnet wall distances; "
                             "runs a sweep instead of a single simulation")
    parser.add_argument("--output-dir", metavar="PATH", default="mdtsim-out",
                        help="output directory (default: %(default)s)")
    return parser


def _parse_distances(text: str):
    try:
        values = tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid --sweep-distances value {text!r}: {exc}")
    if not values:
        raise ConfigError(f"empty --sweep-distances value {text!r}")
    return values


def _distance_label(distance: float) -> str:
    return f"distance_{distance:g}"


def _run_single(config, out_dir: str) -> int:
    try:
        result = run_simulation(config)
    except (StepFailure, IllPosedProblemError) as exc:
        print(f"error: solver failed before producing a state: {exc}",
              file=sys.stderr)
        return EXIT_SOLVER
    write_run_outputs(result, out_dir, serialize_config(config))
    if result.failure is not None:
        print(f"error: solver failed after t={result.records[-1].t:g} in "
              f"stage '{result.failure.stage}'; partial outputs written to "
              f"{out_dir}", file=sys.stderr)
        return EXIT_SOLVER
    logger.info("run complete: outputs in %s", out_dir)
    return EXIT_OK


def _run_sweep(config, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)

    def observer(distance, result):
        sub_dir = os.path.join(out_dir, _distance_label(distance))
        write_run_outputs(result, sub_dir, serialize_config(result.config))

    try:
        sweep = run_magnet_distance_sweep(config, observer=observer)
    except (StepFailure, IllPosedProblemError) as exc:
        print(f"error: sweep aborted: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_sweep_summary(sweep, os.path.join(out_dir, "sweep_summary.csv"))
    failed = [e.distance for e in sweep.entries if not e.completed]
    if failed:
        print(f"error: sweep runs failed at distances {failed}; partial "
              f"outputs written to {out_dir}", file=sys.stderr)
        return EXIT_SOLVER
    logger.info("sweep complete: outputs in %s", out_dir)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        sweep_distances = (_parse_distances(args.sweep_distances)
                           if args.sweep_distances is not None else None)
        config = build_config(args.config,
                              dim=args.dim,
                              refine=args.refine,
                              variant=args.variant,
                              tau=args.tau,
                              sweep_distances=sweep_distances)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if config.sweep_distances is not None:
        if len(config.sweep_distances) < 2:
            print("error: a sweep needs at least 2 magnet distances",
                  file=sys.stderr)
            return EXIT_CONFIG
        return _run_sweep(config, args.output_dir)
    return _run_single(config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())

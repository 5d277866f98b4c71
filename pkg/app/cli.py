"""
Command line interface: converge, verify and paths subcommands

Exit codes: 0 success, 1 check failed or order outside the accepted range,
2 configuration error, 3 numerical failure, 4 I/O failure.
"""

import argparse
import configparser
import logging
import sys
from typing import List, Optional

import pandas as pd

from app import __version__
from app.config import (
    MAX_EXPORT_PATHS, setup_logging,
    EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ERROR, EXIT_IO_ERROR,
)
from app.models import ExperimentConfig
from app.services.config_service import load_config
from app.services.experiment_service import ExperimentService
from app.services.montecarlo_service import ExperimentInvalidError, WEAK_ERROR_COLUMNS

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Weak-error experiments for the Wong-Zakai scheme of Levy-driven Marcus SDEs",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment config file (INI)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--out", help="Override the output directory")
    common.add_argument("--paths-parallel", type=int, default=1, dest="workers",
                        help="Worker processes for the Monte Carlo batches")
    common.add_argument("--reproducible", action="store_true",
                        help="Reduce batches in fixed path-index order")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("converge", parents=[common], help="Run the h ladder and fit the weak order")
    commands.add_parser("verify", parents=[common], help="Run the hypothesis and identity checks")
    paths = commands.add_parser("paths", parents=[common], help="Export coupled sample trajectories")
    paths.add_argument("-n", type=int, default=10, help=f"Number of paths (at most {MAX_EXPORT_PATHS})")
    paths.add_argument("--dense", type=int, default=0, help="Points per step of the continuous-time scheme")
    return parser


def apply_overrides(config: ExperimentConfig, seed: Optional[int], out: Optional[str]) -> ExperimentConfig:
    """Command line overrides, revalidated."""
    data = config.model_dump()
    if seed is not None:
        data["run"]["seed"] = seed
    if out is not None:
        data["run"]["output_dir"] = out
    return ExperimentConfig.model_validate(data)


def cmd_converge(service: ExperimentService, config: ExperimentConfig) -> int:
    report = service.run_convergence(config)
    table = pd.DataFrame([row.model_dump() for row in report.rows], columns=WEAK_ERROR_COLUMNS + ["usable"])
    print(table.to_string(index=False))
    if report.self_convergence is not None:
        print(f"self-convergence: {report.self_convergence:.4g} ({'ok' if report.self_convergence_ok else 'too large'})")
    if report.fitted_order is not None:
        print(f"fitted order: {report.fitted_order:.4f}  r2: {report.fit_r2:.4f}")
    print(f"verdict: {report.verdict}")
    if report.message:
        print(report.message)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_verify(service: ExperimentService, config: ExperimentConfig) -> int:
    report = service.run_verification(config)
    table = pd.DataFrame([check.model_dump() for check in report.checks],
                         columns=["check", "subject", "value", "verdict"])
    print(table.to_string(index=False))
    for check in report.checks:
        if not check.passed:
            print(f"{check.check}: {check.detail}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_paths(service: ExperimentService, config: ExperimentConfig, n: int, dense: int) -> int:
    frames = service.export_paths(config, n, dense=dense)
    for key, frame in frames.items():
        print(f"{key}: {len(frame)} rows")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("ext://sys.stderr")
    try:
        config = apply_overrides(load_config(args.config), args.seed, args.out)
        service = ExperimentService(workers=args.workers, reproducible=args.reproducible)
        if args.command == "converge":
            return cmd_converge(service, config)
        if args.command == "verify":
            return cmd_verify(service, config)
        return cmd_paths(service, config, args.n, args.dense)
    except ExperimentInvalidError as e:
        logger.error(f"Experiment invalid: {e}")
        return EXIT_CHECK_FAILED
    except (ValueError, configparser.Error) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except RuntimeError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL_ERROR
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())

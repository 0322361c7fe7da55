"""
Command-line entry point.

    python cli.py run-fl --config configs/quadratic.ini
    python cli.py barren-plateau --config configs/barren_plateau.ini --workers 4
    python cli.py dp-audit --config configs/quadratic.ini

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""
import argparse
import logging
import sys

from commands import (
    barren_plateau_command,
    bounds_command,
    dp_audit_command,
    run_fl_command,
    variance_check_command,
)
from config import load_config
from errors import ConfigurationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run configuration")
    common.add_argument("--out", default=None, help="output directory (overrides [run] out_dir)")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides [run] seed)")
    common.add_argument("--workers", type=int, default=None, help="worker threads (overrides [run] workers)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--progress", action="store_true", help="progress bars on stderr")
    return common


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="qfl",
        description="Adaptive-DP quantum federated learning simulator and analysis toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_fl = sub.add_parser("run-fl", parents=[common], help="federated training run")
    run_fl.add_argument("--sweep", choices=["epsilon", "participation"], default=None,
                        help="repeat the run over the values in [sweep]")
    sub.add_parser("barren-plateau", parents=[common], help="random-circuit gradient variance scan")
    sub.add_parser("variance-check", parents=[common], help="mini-batch gradient variance vs qubit count")
    sub.add_parser("dp-audit", parents=[common], help="noise calibration and privacy budget report")
    bounds = sub.add_parser("bounds", parents=[common], help="evaluate the convergence bounds")
    bounds.add_argument("--kappa-sweep", action="store_true", help="also tabulate the bound over kappa")
    return parser


def _dispatch(config, args):
    if args.command == "run-fl":
        return run_fl_command(config, sweep=args.sweep, progress=args.progress)
    if args.command == "barren-plateau":
        return barren_plateau_command(config, progress=args.progress)
    if args.command == "variance-check":
        return variance_check_command(config)
    if args.command == "dp-audit":
        return dp_audit_command(config)
    return bounds_command(config, kappa_sweep_requested=args.kappa_sweep)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigurationError(f"--workers must be >= 1, got {args.workers}")
        config = load_config(args.config).with_overrides(args.seed, args.workers, args.out)
        return _dispatch(config, args)
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        logger.error("%s failed: %s", args.command, exc, exc_info=args.verbose)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

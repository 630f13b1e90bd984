"""
DA-Torus Lab Command Line
Runs one experiment subcommand for a TOML configuration and maps errors to exit codes
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from src.evaluation.run_experiments import SUBCOMMANDS, ExperimentRunner
from src.utils.config import defaults_toml, load_config
from src.utils.errors import ComputeFailed, ConfigInvalid, DATorusError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="datorus",
        description="Numerical laboratory for DA maps on the 3-torus and their maximal measures",
    )
    parser.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS, help="Experiment to run")
    parser.add_argument("--config", type=str, default=None, help="TOML config file (default: built-in defaults)")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed (u64)")
    parser.add_argument("--threads", type=int, default=None, help="Worker cap (default: DATORUS_THREADS, else 1)")
    parser.add_argument("--output", type=str, default=None, help="Output directory (default: results/)")
    parser.add_argument("--print-defaults", action="store_true", help="Print the default config as TOML and exit")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function"""
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("DATORUS_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    parser = build_parser()
    args = parser.parse_args(argv)

    if args.print_defaults:
        sys.stdout.write(defaults_toml())
        return EXIT_OK
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        config = load_config(
            args.config,
            seed=args.seed,
            threads=args.threads,
            output_dir=args.output,
            quiet=True if args.quiet else None,
        )
    except ConfigInvalid as exc:
        logger.error(f"❌ Invalid configuration: {exc}")
        return EXIT_CONFIG

    try:
        ExperimentRunner(config).run(args.subcommand)
    except ConfigInvalid as exc:
        logger.error(f"❌ Invalid configuration: {exc}")
        return EXIT_CONFIG
    except DATorusError as exc:
        failure = ComputeFailed(f"{args.subcommand}: {type(exc).__name__}: {exc}")
        logger.error(f"❌ {type(failure).__name__}: {failure}")
        return EXIT_COMPUTE

    logger.info(f"✅ {args.subcommand} complete, results in {config.output_dir}/")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

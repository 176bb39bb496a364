#!/usr/bin/env python3
"""
Run script for the cocycle lab

    python run.py run <config.json | scenario-name> [--seed S] [--workers W] [--out DIR]
    python run.py list-scenarios [--scenario-dir DIR]

Exit codes: 0 success, 1 experiment failure, 2 config error.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from cocyclelab.configs import VERSION, log_level
from cocyclelab.data_manager import DataManager
from cocyclelab.errors import ConfigError
from cocyclelab.scenarios import catalog_digest, list_scenarios, load_scenario
from laboratory import ExperimentManager

EXIT_OK = 0
EXIT_EXPERIMENT_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def setup_logging():
    """Log to stderr only; reports never carry log output"""
    logger.remove()
    logger.add(sys.stderr, level=log_level())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cocyclelab", description="Random walks of SL(n, R) cocycles")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("config", help="scenario JSON file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--workers", type=int, default=None, help="worker processes")
    run.add_argument("--out", type=Path, default=None, help="output directory (default: COCYCLELAB_OUTPUT_DIR or runs/)")
    run.add_argument("--scenario-dir", type=Path, default=None, help="catalog used to resolve scenario names")

    catalog = sub.add_parser("list-scenarios", help="print the bundled scenario catalog")
    catalog.add_argument("--scenario-dir", type=Path, default=None, help="catalog directory override")
    return parser


def run_command(args: argparse.Namespace) -> int:
    try:
        config = load_scenario(args.config, args.scenario_dir)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    if args.workers is not None and args.workers < 1:
        print("❌ --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    print(f"🧮 Running scenario {config.name} ({len(config.experiments)} experiments)")
    manager = ExperimentManager(DataManager(args.out))
    try:
        report = manager.run(config, seed=args.seed, workers=args.workers)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    out = manager.data.base / config.name
    if report["failures"]:
        for failure in report["failures"]:
            print(f"⚠️  {failure['experiment']}: {failure['message']}", file=sys.stderr)
        print(f"❌ {len(report['failures'])} experiment(s) failed; partial report in {out}")
        return EXIT_EXPERIMENT_FAILURE
    print(f"✅ Report written to {out / 'report.json'}")
    return EXIT_OK


def list_command(args: argparse.Namespace) -> int:
    catalog = list_scenarios(args.scenario_dir)
    for entry in catalog:
        print(f"{entry['name']:<24} {entry['description']}")
    logger.debug(f"catalog digest {catalog_digest(catalog)}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main run function"""
    setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run_command(args)
    return list_command(args)


if __name__ == "__main__":
    sys.exit(main())

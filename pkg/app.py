#!/usr/bin/env python3
"""
utap-lab
Universal, class- and image-specific adversarial perturbations against a pool
of small vision transformers, with transfer and ablation experiments

Main application entry point
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path

from config import Config


def configure_logging():
    logging.basicConfig(
        level=getattr(logging, Config.UTAP_LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )


logger = logging.getLogger(__name__)


def build_parser(experiments):
    parser = argparse.ArgumentParser(prog="utap-lab", description="Run one experiment, or the full pipeline")
    parser.add_argument("experiment", nargs="?", choices=experiments,
                        help="experiment to run (default: the 'experiment' config key)")
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--output-dir", help="output root (default: $UTAP_OUTPUT_DIR)")
    return parser


def load_run_config(args):
    """Defaults < config file < --set flags < explicit CLI arguments"""
    from src.application.run_config import RunConfig, parse_config

    text = args.config.read_text(encoding="utf-8") if args.config else ""
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.experiment:
        overrides.append(f"experiment={args.experiment}")
    return parse_config(text, overrides, base=RunConfig(output_dir=str(Config.output_root())))


def run(argv=None):
    """Run the CLI and return the process exit status"""
    configure_logging()
    from src.application import registry
    from src.application.dependency_injection import DependencyContainer
    from src.core.exceptions import UtapLabError

    args = build_parser(registry.names()).parse_args(argv)
    try:
        run_config = load_run_config(args)
        container = DependencyContainer(Config, run_config)
        outputs = asyncio.run(container.get('runner').run(run_config.experiment))
    except UtapLabError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1

    for path in outputs:
        print(path)
    logger.info(f"Done: {len(outputs)} artifacts under {run_config.output_dir}")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

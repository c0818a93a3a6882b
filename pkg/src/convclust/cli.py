"""Command-line entry point: convclust <stage> --config <path>."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .pipeline import STAGES, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convclust",
        description="Staged convolutional k-means feature-learning pipeline.",
    )
    parser.add_argument("stage", choices=list(STAGES) + ["all"],
                        help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="YAML/JSON config file")
    parser.add_argument("--force", action="store_true",
                        help="overwrite artifacts from a different config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", default=None,
                        help="override the config output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    report = run_stage(cfg, args.stage, force=args.force)
    print(report.summary())
    return 0


if __name__ == "__main__":
    sys.exit(main())

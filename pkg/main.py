# main.py
# Import config first to ensure environment variables are loaded
import config  # noqa: F401 - Ensures config is loaded before other imports

import argparse
import logging
import os
import sys
from typing import List, Optional

from config import TOOL_VERSION, config_hash, load_study_config
from services.artifact_service import ArtifactStore
from services.pipeline_service import STAGES, RunContext
from utils.command_wrapper import with_error_handling
from utils.error_handler import configure_logging
from utils.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]

DESCRIPTIONS = {
    "ingest": "validate, filter and store the tweet corpus, pole corpora and user profiles",
    "score": "build reference poles and score every document",
    "panel": "aggregate scores into the user-day panel and flag cohorts",
    "estimate": "difference-in-differences, weekly and imputation estimates for every sample",
    "event-study": "per-day (and binned) treatment effects relative to the reference day",
    "synth": "generate a synthetic panel or corpus with known ground truth",
    "mc": "Monte-Carlo bias and coverage of the estimators on synthetic panels",
    "report": "regression tables and plot data from stored estimates",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slant-study",
        description="Measure news-media slant in social media posts and estimate the effect of a media ban.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="study config JSON (default: configs/study_config.json)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--log-level", choices=LOG_LEVELS, default="INFO")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in DESCRIPTIONS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def run_command(args: argparse.Namespace) -> int:
    @with_error_handling(args.command, f"run_{args.command.replace('-', '_')}", config=args.config)
    def run() -> None:
        if args.threads < 1:
            raise ConfigurationError(f"--threads must be at least 1, got {args.threads}")
        cfg = load_study_config(args.config, seed=args.seed)
        configure_logging(cfg.output_dir, getattr(logging, args.log_level))
        ctx = RunContext(
            cfg=cfg,
            store=ArtifactStore(cfg.output_dir),
            seed=cfg.seed,
            threads=args.threads,
            config_hash=config_hash(cfg),
            tool_version=TOOL_VERSION,
        )
        logger.info(f"[{args.command}] seed={ctx.seed} threads={ctx.threads} config={ctx.config_hash[:12]}")
        outputs = STAGES[args.command](ctx)
        for path in outputs:
            print(f"[OK] {ctx.store.relative(path)}")

    return run()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(None, getattr(logging, args.log_level))
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())

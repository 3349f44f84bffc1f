"""
mvdistill: Command-line Entry Point

    python -m mvdistill [--config FILE] [--set section.key=value ...] COMMAND ...

Resolves the experiment config, dispatches to the registered command, and
writes the command's run manifest. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

from mvdistill import __version__
from mvdistill.commands.registry import add_subparsers, execute_command, list_command_names
from mvdistill.core.config import resolve_config
from mvdistill.core.errors import MvDistillError, UnknownCommandError, UsageError
from mvdistill.core.logging import get_logger, run_context, setup_logging
from mvdistill.orchestrator.pipeline import write_run_manifest
from mvdistill.schemas.models import ErrorResponse

# Import handlers to trigger self-registration
import mvdistill.commands.handlers  # noqa: F401

EXIT_ERROR = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors share the JSON error path."""

    def error(self, message: str) -> None:
        raise UsageError(message, {"usage": self.format_usage().strip()})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mvdistill",
        description="Multi-view diffusion training and score-distilled radiance fields.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted override, e.g. --set distill.steps=500",
    )
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-json", action="store_true", help="JSON log lines instead of the console renderer")
    add_subparsers(parser)
    return parser


def _print_error(error: MvDistillError) -> None:
    response = ErrorResponse(**error.to_payload())
    print(response.model_dump_json(exclude_none=True), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv: List[str] = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except UsageError as exc:
        _print_error(exc)
        return EXIT_USAGE

    setup_logging(args.log_level, json_logs=args.log_json)
    logger = get_logger("main")
    if args.command is None:
        _print_error(UnknownCommandError("no command given", {"available": list_command_names()}))
        return EXIT_USAGE

    started_at = datetime.now(timezone.utc)
    args.argv = argv
    try:
        config = resolve_config(args.config, args.overrides)
        with run_context(command=args.command):
            logger.info("run_started", seed=config.seed)
            result = execute_command(args.command, config, args)
            write_run_manifest(result, args.command, result.config or config, argv, started_at)
    except MvDistillError as exc:
        logger.error("run_failed", command=args.command, error_code=exc.error_code)
        _print_error(exc)
        return EXIT_ERROR

    if result.summary:
        print(json.dumps(result.summary, sort_keys=True, default=str))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

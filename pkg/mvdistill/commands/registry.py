"""
mvdistill: Command Registry

Central registry for every CLI subcommand. Handlers register themselves at
import time with their argparse arguments; `main` builds the parser from the
registry and dispatches by name.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from mvdistill.core.config import ExperimentConfig
from mvdistill.core.errors import UnknownCommandError
from mvdistill.core.logging import get_logger

logger = get_logger(__name__)


@dataclass
class CommandResult:
    """What a handler produced: its output directory, the files in it, and the
    config the stage actually ran with (flags folded in)."""

    out_dir: Path
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    exit_code: int = 0
    config: Optional[ExperimentConfig] = None


Argument = Tuple[Sequence[str], Dict[str, Any]]
Handler = Callable[[ExperimentConfig, argparse.Namespace], CommandResult]


def arg(*flags: str, **kwargs: Any) -> Argument:
    return flags, kwargs


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Registry
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━

_COMMAND_REGISTRY: Dict[str, Dict[str, Any]] = {}


def register_command(
    name: str,
    description: str,
    handler: Handler,
    arguments: Optional[List[Argument]] = None,
) -> None:
    _COMMAND_REGISTRY[name] = {
        "name": name,
        "description": description,
        "handler": handler,
        "arguments": arguments or [],
    }
    logger.debug("command_registered", name=name)


def get_command(name: str) -> Optional[Dict[str, Any]]:
    return _COMMAND_REGISTRY.get(name)


def list_command_names() -> List[str]:
    return list(_COMMAND_REGISTRY.keys())


def add_subparsers(parser: argparse.ArgumentParser) -> None:
    """One subparser per registered command, in registration order."""
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command in _COMMAND_REGISTRY.values():
        sub = subparsers.add_parser(command["name"], help=command["description"], description=command["description"])
        for flags, kwargs in command["arguments"]:
            sub.add_argument(*flags, **kwargs)


def execute_command(name: str, config: ExperimentConfig, args: argparse.Namespace) -> CommandResult:
    command = get_command(name)
    if command is None:
        raise UnknownCommandError(
            f"command '{name}' not found, available: {list_command_names()}",
            {"command": name},
        )
    logger.info("command_executing", name=name)
    result = command["handler"](config, args)
    logger.info("command_finished", name=name, out=str(result.out_dir), n_artifacts=len(result.artifacts))
    return result

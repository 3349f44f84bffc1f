"""
mvdistill: Structured Logging

structlog key/value events on stderr, console-rendered for interactive runs
and JSON for batch jobs. Training and distillation log tensors freely; the
scalar processor turns 0-d tensors and numpy scalars into plain numbers so
JSON lines stay parseable. `run_context` binds run keys (command, stage)
onto every line emitted inside it.
"""

from __future__ import annotations

import logging
import sys
from typing import Any, MutableMapping

import structlog


def plain_scalars(_logger: Any, _method: str, event_dict: MutableMapping[str, Any]) -> MutableMapping[str, Any]:
    for key, value in event_dict.items():
        if getattr(value, "ndim", None) == 0 and hasattr(value, "item"):
            event_dict[key] = value.item()
    return event_dict


def run_context(**values: Any):
    """Context manager binding the non-None `values` to every log line inside it."""
    return structlog.contextvars.bound_contextvars(**{k: v for k, v in values.items() if v is not None})


def setup_logging(level: str = "INFO", json_logs: bool = False) -> None:
    shared_processors: list = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt="iso"),
        plain_scalars,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.UnicodeDecoder(),
    ]

    if json_logs:
        renderer = structlog.processors.JSONRenderer(sort_keys=True)
    else:
        renderer = structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty())

    structlog.configure(
        processors=[
            *shared_processors,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    formatter = structlog.stdlib.ProcessorFormatter(
        processors=[
            structlog.stdlib.ProcessorFormatter.remove_processors_meta,
            renderer,
        ],
    )

    # stdout stays free for command output
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)

    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(level.upper())


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    return structlog.get_logger(name)

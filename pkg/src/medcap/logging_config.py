"""Logging setup for the medcap CLI and per-epoch training logs."""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Chatty at DEBUG: PIL dumps PNG chunks, urllib3 logs every connection.
NOISY_LOGGERS = ("PIL", "urllib3", "git")


def _handler(
    handler: logging.Handler, level: int, formatter: logging.Formatter
) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(
    level: str = "INFO", log_file: Optional[Path] = None, format_string: Optional[str] = None
) -> None:
    """Configure root and ``medcap`` loggers.

    Warnings and errors go to stderr so JSON written to stdout stays parseable.
    A log file, when given, receives everything at the configured level.
    Unknown level names fall back to INFO.

    Example:
        >>> setup_logging(level="DEBUG", log_file=Path("outputs/medcap.log"))
        >>> logging.getLogger("medcap.modality_classifier").debug("epoch done")
    """
    formatter = logging.Formatter(format_string or DEFAULT_FORMAT)
    resolved = getattr(logging, level.upper(), None)
    if not isinstance(resolved, int):
        resolved = logging.INFO

    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(resolved)
    root.addHandler(_handler(logging.StreamHandler(sys.stderr), logging.WARNING, formatter))

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        root.addHandler(_handler(logging.FileHandler(log_file), logging.DEBUG, formatter))

    logging.getLogger("medcap").setLevel(resolved)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(max(resolved, logging.INFO))


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


class JsonLinesWriter:
    """Append-only JSON-lines sink for per-epoch training metrics."""

    def __init__(self, path: Optional[Path]) -> None:
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict[str, Any]) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=False) + "\n")

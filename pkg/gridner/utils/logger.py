"""
Logging Configuration
Console logging for the gridner package: one stderr handler on the package
logger, a per-invocation verbosity switch and run-context prefixes for
training progress lines.
"""

import logging
import sys
from typing import Any, MutableMapping, Optional, Tuple

from gridner.core.config import settings


ROOT_LOGGER = "gridner"
CONSOLE_HANDLER = "gridner.console"


def _level(name: str) -> int:
    return getattr(logging, name.upper(), logging.INFO)


def setup_logger(name: str = ROOT_LOGGER, level: Optional[str] = None) -> logging.Logger:
    """
    Configure and return application logger.

    Output goes to stderr so commands that print JSON keep stdout clean.

    Args:
        name: Logger name
        level: Level name overriding `settings.LOG_LEVEL`

    Returns:
        logging.Logger: Configured logger instance
    """
    logger = logging.getLogger(name)
    log_level = _level(level or settings.LOG_LEVEL)
    logger.setLevel(log_level)

    if any(handler.get_name() == CONSOLE_HANDLER for handler in logger.handlers):
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.set_name(CONSOLE_HANDLER)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(logging.Formatter(fmt=settings.LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    logger.addHandler(console_handler)
    return logger


def set_verbosity(quiet: bool = False, verbose: bool = False) -> int:
    """
    Console level for one command invocation.

    Quiet shows warnings and errors only; verbose adds debug lines. Quiet mode
    only raises the console handler's threshold, so records still propagate to
    other handlers at the configured level.

    Returns:
        int: The console level now in effect
    """
    configured = _level(settings.LOG_LEVEL)
    console = logging.WARNING if quiet else logging.DEBUG if verbose else configured
    logger.setLevel(min(console, configured))
    for handler in logger.handlers:
        if handler.get_name() == CONSOLE_HANDLER:
            handler.setLevel(console)
    return console


def get_logger(name: str) -> logging.Logger:
    """Child of the application logger, e.g. `gridner.training`."""
    return logger.getChild(name)


class RunLogger(logging.LoggerAdapter):
    """
    Prefixes each message with its run context.

    `run_logger("training", phase="mlm").bind(epoch=3).info("loss=0.41")`
    logs "[mlm epoch=3] loss=0.41".
    """

    def process(self, msg: Any, kwargs: MutableMapping[str, Any]) -> Tuple[Any, MutableMapping[str, Any]]:
        phase = self.extra.get("phase")
        fields = " ".join(f"{key}={value}" for key, value in self.extra.items() if key != "phase")
        prefix = " ".join(part for part in (phase, fields) if part)
        return (f"[{prefix}] {msg}" if prefix else msg), kwargs

    def bind(self, **context: Any) -> "RunLogger":
        return RunLogger(self.logger, {**self.extra, **context})


def run_logger(name: str, **context: Any) -> RunLogger:
    return RunLogger(get_logger(name), context)


logger = setup_logger()

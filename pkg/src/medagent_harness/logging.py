"""Logging setup using Loguru.

The console gets a colorized stderr sink. ``--log-dir`` adds a rotating log, and
every run directory gets its own ``run.log``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

from loguru import logger

_PLAIN_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} | "
    "{extra[entry]} | {message}"
)


@dataclass
class LogConfig:
    """Configuration for logging setup."""

    log_dir: Path | str | None = None
    level: str = "INFO"
    rotation: str = "10 MB"
    retention: str = "7 days"
    json_logs: bool = False
    console: bool = True


def setup_logging(config: LogConfig | None = None) -> None:
    """Replace Loguru's default sink with the configured console and file sinks.

    Args:
        config: Logging configuration. Uses defaults if None.

    """
    if config is None:
        config = LogConfig()

    logger.remove()
    logger.configure(extra={"entry": "-"})

    if config.console:
        logger.add(
            sys.stderr,
            level=config.level,
            format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
            "<level>{level: <8}</level> | "
            "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
            "<level>{message}</level>",
            colorize=True,
        )

    if config.log_dir is not None:
        log_path = Path(config.log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_path / "medagent-harness.log",
            level=config.level,
            rotation=config.rotation,
            retention=config.retention,
            compression="gz",
            serialize=config.json_logs,
            format=_PLAIN_FORMAT,
        )


def add_run_log(path: Path, *, level: str = "DEBUG", json_logs: bool = False) -> int:
    """Attach a sink writing one run's log to ``path``.

    Returns:
        The sink id, for ``logger.remove`` when the run ends.

    """
    logger.configure(extra={"entry": "-"})
    path.parent.mkdir(parents=True, exist_ok=True)
    return logger.add(
        path,
        level=level,
        serialize=json_logs,
        format=_PLAIN_FORMAT,
        encoding="utf-8",
    )

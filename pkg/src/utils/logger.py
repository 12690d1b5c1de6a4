"""Logging configuration for LQELab"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

import colorlog

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LEVEL_COLORS = {
    "DEBUG": "cyan",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "red,bg_white",
}


def log_dir() -> Path:
    """Directory for per-module log files (LQELAB_LOG_DIR, default ``logs``)."""
    return Path(os.getenv("LQELAB_LOG_DIR", "logs"))


def console_level() -> int:
    name = os.getenv("LQELAB_LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def _console_handler() -> logging.Handler:
    handler = colorlog.StreamHandler(sys.stdout)
    handler.setLevel(console_level())
    handler.setFormatter(
        colorlog.ColoredFormatter("%(log_color)s" + LOG_FORMAT, datefmt=DATE_FORMAT,
                                  log_colors=LEVEL_COLORS)
    )
    return handler


def _file_handler(log_file: str) -> logging.Handler:
    path = log_dir() / log_file
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    return handler


def setup_logger(name: str, log_file: Optional[str] = None) -> logging.Logger:
    """
    Colored console logger, plus a DEBUG-level file under ``log_dir()``
    when ``log_file`` is given. Repeated calls return the same logger.
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    logger.setLevel(logging.DEBUG)
    logger.addHandler(_console_handler())
    if log_file:
        logger.addHandler(_file_handler(log_file))
    logger.propagate = False
    return logger

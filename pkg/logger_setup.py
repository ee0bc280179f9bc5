"""Reusable logging helper.

Usage:
    from logger_setup import get_logger
    log = get_logger(__name__)          # in any module
"""

import logging
import os
import sys
from datetime import date
from pathlib import Path

LOG_DIR = Path(os.getenv("GLYPHDIFF_LOG_DIR", "logs"))
LOG_FORMAT = "%(asctime)s  %(message)s"


def _new_file_handler(script_name: str) -> logging.Handler:
    """Return a FileHandler logs/<script>_YYYY-MM-DD.log (append mode)."""
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    logfile = LOG_DIR / f"{script_name}_{date.today()}.log"
    return logging.FileHandler(logfile, mode="a", encoding="utf-8")


def get_logger(name: str | None = None) -> logging.Logger:
    """
    Return a logger that writes to both stderr *and* a dated file
    (stdout is left to the JSON result lines).
    Calling this multiple times in the same process reuses handlers,
    so you won't get duplicate lines.
    """
    logger = logging.getLogger(name or "root")

    if logger.handlers:        # already configured – just return it
        return logger

    logger.setLevel(logging.INFO)

    ch = logging.StreamHandler(sys.stderr)
    ch.setFormatter(logging.Formatter(LOG_FORMAT))

    script = (name or "log").split(".")[-1]
    fh = _new_file_handler(script)
    fh.setFormatter(logging.Formatter(LOG_FORMAT))

    logger.addHandler(ch)
    logger.addHandler(fh)
    logger.propagate = False   # stop double logging through root
    return logger


def attach_run_log(logger: logging.Logger, run_dir: str | os.PathLike) -> logging.Handler:
    """Also write *logger* into <run_dir>/run.log; idempotent per run dir."""
    target = str(Path(run_dir) / "run.log")
    for h in logger.handlers:
        if isinstance(h, logging.FileHandler) and h.baseFilename == os.path.abspath(target):
            return h
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(target, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    return handler


def detach_run_log(logger: logging.Logger, handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    handler.close()

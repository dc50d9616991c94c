"""
Logging setup for command entry points.

Library modules only create named loggers; handlers are attached here, once
per process, by the script that is actually running.
"""

import logging
import sys
from pathlib import Path

LOG_FORMAT = "%(asctime)s  %(levelname)-8s  %(message)s"


def configure_logging(log_name: str, logs_dir: str | Path | None = None, level=logging.INFO):
    """Log to stdout and to ``{logs_dir}/{log_name}.log``."""
    if logs_dir is None:
        from config import LOGS_DIR
        logs_dir = LOGS_DIR
    logs_dir = Path(logs_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(logs_dir / f"{log_name}.log"),
        ],
        force=True,
    )
    return logging.getLogger(log_name)

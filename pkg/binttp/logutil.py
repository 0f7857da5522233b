"""日志配置与进度回调"""

from __future__ import annotations

import logging
import sys
from typing import Callable

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

ProgressCallback = Callable[[str], None]


def setup_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def log_message(message: str, logger: ProgressCallback | None = None) -> None:
    """有回调时交给回调，否则写入 binttp 日志"""
    if logger:
        logger(message)
    else:
        logging.getLogger("binttp").info(message)

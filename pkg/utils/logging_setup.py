"""
Logging Setup
Single place that configures loguru sinks for the command line
"""

import sys
from typing import Optional

from loguru import logger

LOG_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{line} - {message}"
)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Replace the default sink with stderr at `level`, plus an optional file sink"""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file:
        logger.add(log_file, level="DEBUG", rotation="10 MB", encoding="utf-8")

"""Logging configuration"""
import logging
import sys
from fluidsched.config import get_settings

settings = get_settings()

def setup_logger(level: str = None):
    logger = logging.getLogger("fluidsched")
    logger.setLevel(getattr(logging, (level or settings.log_level).upper(), logging.INFO))
    logger.propagate = False

    if not logger.handlers:
        # stderr: stdout carries reports
        handler = logging.StreamHandler(sys.stderr)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


logger = setup_logger()

import logging
import sys
from typing import Optional

LOGGER_NAME = "asyncnet"


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return the package logger or one of its children."""
    return logging.getLogger(LOGGER_NAME if not name else f"{LOGGER_NAME}.{name}")


def configure_logging(level: str = "WARNING", log_file: Optional[str] = None) -> logging.Logger:
    """Attach a stderr handler and, optionally, a timestamped file handler."""
    logger = get_logger()
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(getattr(logging, str(level).upper(), logging.WARNING))
    stream.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.addHandler(stream)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter("[%(asctime)s] %(levelname)s %(name)s %(message)s"))
        logger.addHandler(file_handler)
    return logger


def log_action(action: str, details: str = "", level: int = logging.INFO) -> None:
    """Emit one ``ACTION: details`` record."""
    get_logger().log(level, "%s: %s", action, details)

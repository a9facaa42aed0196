import logging
from pathlib import Path

from pythonjsonlogger.json import JsonFormatter

CONSOLE_FORMAT = "%(asctime)s %(levelname)s %(message)s"
JSON_FIELDS = "%(asctime)s %(levelname)s %(name)s %(message)s"


def get_logger(name: str) -> logging.Logger:
    """Module logger with a console handler, attached once."""
    logger = logging.getLogger(name)
    if not any(getattr(h, "_attest_console", False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
        handler._attest_console = True
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
    return logger


def setup_file_logger(log_path: Path, level: int = logging.INFO) -> None:
    """JSON lines on the root logger, one handler per file."""
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    already_has_file_handler = any(
        isinstance(h, logging.FileHandler) and h.baseFilename == str(log_path.resolve())
        for h in root_logger.handlers
    )
    if already_has_file_handler:
        return

    file_handler = logging.FileHandler(log_path, mode="a", encoding="utf-8")
    file_handler.setFormatter(JsonFormatter(JSON_FIELDS))
    root_logger.addHandler(file_handler)
    root_logger.setLevel(level)

"""Logging setup and atomic file writes shared by the CLI and library entry points."""

import logging
import logging.handlers
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Iterator, Optional, Union

LOGGER_NAME = "aqa_transformer"
LOG_FILE = "aqa_transformer.log"


def default_log_dir() -> Path:
    return Path(os.environ.get("AQA_LOG_DIR") or Path.home() / ".aqa_transformer" / "logs")


def setup_logging(level: Union[str, int] = "INFO", log_dir: Optional[Union[str, Path]] = None) -> logging.Logger:
    """Attach a rotating file handler and a stderr handler to the root logger.

    Module loggers (``logging.getLogger(__name__)``) propagate to it. Calling
    again only updates the level.
    """
    root = logging.getLogger()
    root.setLevel(level)
    if any(getattr(h, "_aqa_handler", False) for h in root.handlers):
        return logging.getLogger(LOGGER_NAME)

    formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s", datefmt="%H:%M:%S")

    directory = Path(log_dir) if log_dir is not None else default_log_dir()
    directory.mkdir(parents=True, exist_ok=True)
    file_handler = logging.handlers.RotatingFileHandler(
        directory / LOG_FILE,
        maxBytes=5 * 1024 * 1024,
        backupCount=3,
    )
    file_handler.setFormatter(formatter)

    # stdout carries command output (frame plans, tables)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)

    for handler in (file_handler, console_handler):
        handler._aqa_handler = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    return logging.getLogger(LOGGER_NAME)


@contextmanager
def atomic_write(path: Union[str, Path], mode: str = "w", **open_kwargs) -> Iterator[IO]:
    """Write to a temporary sibling of ``path`` and move it into place when the block succeeds.

    On error the temporary file is removed and any previous ``path`` is left as it was.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **open_kwargs) as handle:
            yield handle
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise

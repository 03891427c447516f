"""Centralized logging configuration for lfr-tabular.

`setup_logging` sends application records to stderr and to the rotating file
from the `logging` section, plus a `run.log` in the run directory when given.
`TrainingLog` is a separate, non-propagating channel that writes one
tab-separated row per epoch both to stdout and to a TSV file in the run
directory.

Example:
    ```python
    from lfr_tabular.logger import get_logger

    logger = get_logger(__name__)
    logger.info("Selection finished")
    ```
"""

import logging
import logging.handlers
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from lfr_tabular.config import ConfigManager

TRAINLOG_NAME = "lfr_tabular.trainlog"
TRAINLOG_COLUMNS = ("epoch", "e_step_loss", "m_step_loss", "wall_seconds")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
RUN_LOG_NAME = "run.log"


def _level(name: str) -> int:
    level = name.upper()
    if level not in LOG_LEVELS:
        raise ValueError(
            f"Invalid log level: {level}. Must be one of {list(LOG_LEVELS)}"
        )
    return int(getattr(logging, level))


def setup_logging(
    config_manager: ConfigManager,
    console_level: Optional[str] = None,
    run_directory: Optional[Path] = None,
) -> List[logging.Handler]:
    """Route application logs of one command.

    Records go to stderr, so stdout carries only command output and the TSV
    training rows, and to the rotating file named in the `logging` section.
    With `run_directory`, a plain `run.log` in that directory receives the
    same records, keeping each run's log next to its `train_log.tsv`.

    Args:
        config_manager: Source of the `logging` settings.
        console_level: Level of the stderr handler; defaults to the
            configured level. `pretrain --quiet` passes WARNING.
        run_directory: Run directory for the per-run log file.

    Returns:
        The installed handlers.

    Raises:
        ValueError: If a log level is not recognised.
        OSError: If a log file or its directory cannot be created.
    """
    settings = config_manager.logging
    file_level = _level(settings.level)
    stderr_level = _level(console_level) if console_level else file_level
    formatter = logging.Formatter(settings.format)

    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(stderr_level)
    handlers: List[logging.Handler] = [console_handler]

    log_file = Path(settings.file)
    try:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            logging.handlers.RotatingFileHandler(
                log_file,
                maxBytes=settings.max_size,
                backupCount=settings.backup_count,
                encoding="utf-8",
            )
        )
        if run_directory is not None:
            run_directory.mkdir(parents=True, exist_ok=True)
            handlers.append(
                logging.FileHandler(run_directory / RUN_LOG_NAME, encoding="utf-8")
            )
    except OSError as e:
        for handler in handlers:
            handler.close()
        raise OSError(f"Failed to set up file logging: {e}") from e

    for handler in handlers[1:]:
        handler.setLevel(file_level)
    for handler in handlers:
        handler.setFormatter(formatter)
        root_logger.addHandler(handler)
    root_logger.setLevel(min(file_level, stderr_level))
    root_logger.debug(
        "Logging to %s (max %d bytes, %d backups)%s",
        log_file,
        settings.max_size,
        settings.backup_count,
        f" and {run_directory / RUN_LOG_NAME}" if run_directory is not None else "",
    )
    return handlers


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the specified name.

    Args:
        name: The name for the logger, typically __name__ of the calling module.

    Returns:
        A logger instance configured with the root logger's settings.
    """
    return logging.getLogger(name)


class TrainingLog:
    """Per-epoch TSV log written to stdout and to a file.

    The underlying logger does not propagate, so TSV rows never end up in the
    formatted application log.
    """

    def __init__(self, tsv_path: Optional[Path], echo: bool = True) -> None:
        """Attach the TSV handlers.

        Args:
            tsv_path: File receiving the rows; None disables the file copy.
            echo: Also write rows to stdout.

        Raises:
            OSError: If the TSV file cannot be created.
        """
        self._logger = logging.getLogger(TRAINLOG_NAME)
        self._logger.propagate = False
        self._logger.setLevel(logging.INFO)
        self._handlers: list[logging.Handler] = []
        formatter = logging.Formatter("%(message)s")
        if echo:
            self._handlers.append(logging.StreamHandler(sys.stdout))
        if tsv_path is not None:
            tsv_path.parent.mkdir(parents=True, exist_ok=True)
            self._handlers.append(
                logging.FileHandler(tsv_path, mode="w", encoding="utf-8")
            )
        for handler in self._handlers:
            handler.setFormatter(formatter)
            self._logger.addHandler(handler)
        self._write(TRAINLOG_COLUMNS)

    def _write(self, fields: Sequence[object]) -> None:
        self._logger.info("\t".join(str(f) for f in fields))

    def row(
        self, epoch: int, e_loss: float, m_loss: float, wall_seconds: float
    ) -> None:
        """Write one epoch row."""
        self._write([epoch, f"{e_loss:.6f}", f"{m_loss:.6f}", f"{wall_seconds:.3f}"])

    def close(self) -> None:
        """Flush and detach the handlers."""
        for handler in self._handlers:
            handler.flush()
            self._logger.removeHandler(handler)
            handler.close()
        self._handlers.clear()

"""Custom exceptions for the lfr-tabular package.

All errors raised on purpose by this package derive from `LfrError`, which
carries a primary message, optional details and the process exit code the
command-line surface should return when the error escapes a command.

Exit codes:
    0: success
    1: configuration error
    2: data error (bad input files, checkpoints, I/O failures)
    3: numerical failure (NaN abort, broken gradient contract)

Example:
    ```python
    try:
        raise ConfigError("Failed to load configuration", "File not found")
    except LfrError as e:
        print(f"Error: {e}")  # Error: Failed to load configuration - File not found
        sys.exit(e.exit_code)
    ```
"""

from typing import Dict, Optional

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class LfrError(Exception):
    """Base exception class for all lfr-tabular errors.

    Attributes:
        message: The primary error message describing what went wrong.
        details: Additional context about the error, if available.
        exit_code: Process exit code used by the CLI for this error family.
    """

    exit_code: int = EXIT_NUMERICAL

    def __init__(self, message: str, details: Optional[str] = None) -> None:
        """Initialize the error with a message and optional details.

        Args:
            message: A human-readable description of what went wrong.
            details: Optional technical details (shapes, paths, values).
        """
        self.message = message
        self.details = details
        super().__init__(f"{message}{f' - {details}' if details else ''}")


class ConfigError(LfrError):
    """Raised when a run configuration cannot be loaded or fails validation."""

    exit_code = EXIT_CONFIG


class DataError(LfrError):
    """Raised when a dataset cannot be read, parsed or batched."""

    exit_code = EXIT_DATA


class CheckpointError(DataError):
    """Raised for unreadable, corrupted or unwritable checkpoints."""


class ShapeError(LfrError):
    """Raised when tensor shapes do not fit an operation."""

    exit_code = EXIT_NUMERICAL


class GradientError(LfrError):
    """Raised when the gradient tape contract is violated.

    Examples are a non-scalar loss passed to `backward` or a second
    `backward` call without a fresh forward pass.
    """

    exit_code = EXIT_NUMERICAL


class NumericalError(LfrError):
    """Raised when training or optimization produces NaN or Inf values.

    Attributes:
        batch_index: Index of the mini-batch that failed, if known.
        breakdown: Per-projector loss values at the time of failure.
    """

    exit_code = EXIT_NUMERICAL

    def __init__(
        self,
        message: str,
        details: Optional[str] = None,
        batch_index: Optional[int] = None,
        breakdown: Optional[Dict[int, float]] = None,
    ) -> None:
        """Initialize the error with optional diagnostic context.

        Args:
            message: A human-readable description of the failure.
            details: Optional technical details.
            batch_index: Index of the failing mini-batch.
            breakdown: Loss contribution of every projector head.
        """
        self.batch_index = batch_index
        self.breakdown = dict(breakdown or {})
        super().__init__(message, details)


class SelectionError(LfrError):
    """Raised when diverse projector selection cannot proceed."""

    exit_code = EXIT_NUMERICAL


class DegenerateSignatureError(SelectionError):
    """Raised when a projector emits all-zero outputs on the probe batch."""

"""
Exception types shared across the package.

Each maps onto a CLI exit code (see cli.EXIT_CODES).
"""

from typing import Optional


class DsgdError(Exception):
    """Base class for package errors."""


class UsageError(DsgdError):
    """Invalid flag combination or unknown option value."""


class DataError(DsgdError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelFormatError(DataError):
    """Model file has a bad header, is truncated, or fails its checksum."""


class DivergenceError(DsgdError, ArithmeticError):
    """Non-finite function values during training (step size too large)."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        message = f"non-finite function value at iteration {iteration}"
        if detail:
            message += f" ({detail})"
        message += "; try a smaller theta"
        super().__init__(message)

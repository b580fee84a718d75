"""
Error types shared by every pafa module.

Core modules raise these; tool handlers turn them into result dicts and
the CLI turns them into exit codes:

- 1: usage (bad flags, bad config)
- 2: data (unreadable or malformed input)
- 3: numeric (NaN, divergence, failed gradient check)
"""

from typing import Optional


class PafaError(Exception):
    """Base class for all pafa errors."""

    exit_code = 2


class UsageError(PafaError):
    """Invalid invocation or configuration."""

    exit_code = 1


class DataError(PafaError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 2


class ParseError(DataError):
    """A file or name could not be parsed."""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        token: Optional[str] = None,
    ):
        self.line = line
        self.token = token
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestIOError(DataError):
    """The manifest file itself could not be read or written."""


class NumericError(PafaError):
    """Non-finite values or a failed numerical verification."""

    exit_code = 3

"""Exceptions raised by the SENT desk laboratory."""

from __future__ import annotations


class SentLabError(Exception):
    """Exception to indicate an error inside the lab."""

    def __init__(self, status: str, message: str) -> None:
        """Initialize the exception."""
        super().__init__(message)
        self.status = status
        self.message = message


class ConfigurationError(SentLabError):
    """Invalid configuration or generator parameters."""

    def __init__(self, message: str) -> None:
        """Initialize the exception."""
        super().__init__("config", message)


class NumericError(SentLabError):
    """Non-finite value met during an objective or an update."""

    def __init__(self, message: str) -> None:
        """Initialize the exception."""
        super().__init__("numeric", message)


class MissingArtifactError(SentLabError):
    """A file another command should have produced is absent."""

    def __init__(self, message: str) -> None:
        """Initialize the exception."""
        super().__init__("missing", message)


class TrainingAborted(SentLabError):
    """Training stopped after a numeric failure; the last good policy was kept."""

    def __init__(self, step: int, message: str) -> None:
        """Initialize the exception."""
        super().__init__("aborted", message)
        self.step = step

"""
Exception hierarchy for the scoring pipeline

The CLI maps these to exit codes: ScoringError subclasses -> 1,
OSError (unreadable/unwritable files) -> 2.
"""

from typing import Optional


class ScoringError(Exception):
    """Base class for every error raised on purpose by the pipeline"""


class ValidationError(ScoringError, ValueError):
    """Bad parameters or bad data (dimensions, labels, manifest rows)"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ImageFormatError(ScoringError):
    """The image decodes, but its format, mode or bit depth is unsupported"""


class ModelFormatError(ScoringError):
    """A saved forest is corrupt or was written by an incompatible version"""

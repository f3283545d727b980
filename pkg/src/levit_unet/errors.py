"""
Exception hierarchy shared by every LeViT-UNet module.

Errors are logged where they are detected and re-raised; nothing in this
package swallows them behind a fallback value.
"""

from typing import Optional


class LevitUNetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(LevitUNetError, ValueError):
    """Invalid model/run configuration or inconsistent tensor shapes."""

    exit_code = 2


class InputError(LevitUNetError, ValueError):
    """Invalid user-supplied data (labels out of range, missing slices, ...)."""

    exit_code = 2


class FormatError(LevitUNetError):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(f"file={path}")
        if offset is not None:
            where.append(f"offset={offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class IntegrityError(FormatError):
    """Checksum mismatch or truncated checkpoint."""


class TrainingDivergedError(LevitUNetError):
    """NaN/Inf loss or gradient during training."""

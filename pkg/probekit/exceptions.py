"""Typed exception hierarchy for probekit."""

from typing import Optional


class ProbekitError(Exception):
    """Base error for probekit."""


class DimensionError(ProbekitError):
    """Raised when tensor shapes do not fit an operation."""


class InputError(ProbekitError):
    """Raised for malformed values, labels or records."""


class NumericError(ProbekitError):
    """Raised when a loss or intermediate value stops being finite."""

    def __init__(
        self, message: str, *, step: Optional[int] = None, epoch: Optional[int] = None
    ):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


class GraphError(ProbekitError):
    """Raised for unknown node ids, cycles and orphan parameters."""


class DataError(ProbekitError):
    """Raised for missing, truncated or corrupt dataset files."""


class CheckpointError(ProbekitError):
    """Raised when a checkpoint file has a bad magic, version or length."""


class InvariantError(ProbekitError):
    """Raised when a property that must always hold is violated."""


class ConfigError(ProbekitError):
    """Raised when a scenario or probe configuration is invalid."""

"""Exception hierarchy shared by every module."""

from __future__ import annotations


class GtnError(Exception):
    """Base class for all package errors."""


class ParameterError(GtnError, ValueError):
    """Invalid argument: bad dimensions, out-of-range values, mismatched shapes."""


class NumericError(GtnError, ArithmeticError):
    """Non-finite data, zero norms, or an iterative method that failed to converge."""

    def __init__(self, message: str, *, gap: float | None = None, sample: int | None = None):
        super().__init__(message)
        self.gap = gap
        self.sample = sample


class FormatError(GtnError, ValueError):
    """Malformed file content. ``offset`` is the byte offset (binary) or row (text) at fault."""

    def __init__(self, message: str, *, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class TrainingError(GtnError):
    """Training aborted; the partial loss trace is attached."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class ExperimentError(GtnError):
    """An experiment stage failed; ``point`` names the failing sweep point."""

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = point

"""Exception hierarchy shared by all delaysteer modules."""

from __future__ import annotations


class DelaySteerError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DelaySteerError):
    """A configuration document violates the schema or a model invariant.

    Carries the offending field path so callers can produce a precise
    diagnostic.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ShapeError(DelaySteerError, ValueError):
    """Matrix/vector dimensions are inconsistent."""


class NumericInputError(DelaySteerError, ValueError):
    """An input sample contained NaN or infinity."""


class ParameterError(DelaySteerError, ValueError):
    """A scalar parameter is outside its allowed range (step counts, grids)."""


class DomainError(DelaySteerError, ValueError):
    """A matrix argument violates a definiteness or symmetry precondition."""


class TimeRangeError(DelaySteerError, ValueError):
    """A time argument lies outside the interval an operation is defined on."""


class HistoryError(DelaySteerError):
    """A control history does not cover the window required by a transform."""


class GridMismatchError(DelaySteerError):
    """Two time grids that must coincide node-by-node do not."""


class RiccatiBlowUpError(DelaySteerError):
    """A Riccati solution escaped to infinity before reaching the horizon."""

    def __init__(self, escape_time: float, magnitude: float):
        self.escape_time = escape_time
        self.magnitude = magnitude
        super().__init__(
            f"Riccati solution exceeded {magnitude:.3g} at t={escape_time:.6g}"
        )


class ControllabilityError(DelaySteerError):
    """The system fails the Grammian invertibility precondition."""


class BelowThresholdError(DelaySteerError):
    """The requested terminal covariance lies below the structural minimum."""


class ConvergenceError(DelaySteerError):
    """An iterative solve stopped before reaching its tolerance.

    ``best`` holds the best iterate found, so callers can inspect how far
    the solve got.
    """

    def __init__(self, message: str, best=None, residual: float | None = None):
        self.best = best
        self.residual = residual
        super().__init__(message)


class FullActuationError(DelaySteerError):
    """The input matrix does not have full row rank where required."""


class NormalityError(DelaySteerError):
    """The closed-loop generator is not normal where the bound requires it."""


class SimulationDivergedError(DelaySteerError):
    """A sample path left the finite range during integration."""

    def __init__(self, time: float, path_index: int):
        self.time = time
        self.path_index = path_index
        super().__init__(f"path {path_index} diverged at t={time:.6g}")

"""
Exception types raised by the relaxometry toolkit.

Input problems derive from ValueError, numerical failures from RuntimeError,
so callers (and the CLI exit-code mapping) can tell them apart.
"""
from typing import Optional


class RelaxometryError(Exception):
    """Base class for every error raised by this package."""


class DomainError(RelaxometryError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(RelaxometryError, ValueError):
    """Arrays that must share a grid or length do not."""


class DegenerateInputError(RelaxometryError, ValueError):
    """The input carries no information (e.g. an all-zero spectrum)."""


class DegenerateBasisError(RelaxometryError, ValueError):
    """A basis function vanished after subtraction and clipping."""


class DegenerateCalibrationError(RelaxometryError, ValueError):
    """A calibration slope or reference is unusable."""


class SingularDesignError(RelaxometryError, ValueError):
    """A linear design matrix is rank deficient (e.g. all x identical)."""


class InsufficientDataError(RelaxometryError, ValueError):
    """Fewer points than the operation needs."""


class SequenceValidationError(RelaxometryError, ValueError):
    """A pulse sequence is malformed."""


class StructureError(RelaxometryError, ValueError):
    """A trace lacks a half, window or channel the evaluation needs."""


class DegenerateTraceError(RelaxometryError, ValueError):
    """A trace cannot be normalized (zero normalization counts)."""


class ConfigError(RelaxometryError, ValueError):
    """A configuration key is unknown, empty or holds an invalid value."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class CalibrationError(RelaxometryError, ValueError):
    """A charge-ratio mapping could not be calibrated."""


class CalibrationRangeError(CalibrationError):
    """A count ratio lies outside the validity range of a mapping."""


class FitError(RelaxometryError, RuntimeError):
    """A least-squares fit did not converge."""

    def __init__(
        self,
        message: str,
        n_iterations: Optional[int] = None,
        last_cost: Optional[float] = None,
    ):
        self.n_iterations = n_iterations
        self.last_cost = last_cost
        details = []
        if n_iterations is not None:
            details.append(f"iterations={n_iterations}")
        if last_cost is not None:
            details.append(f"last_cost={last_cost:.6g}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)

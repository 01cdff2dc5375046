"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GeeError(Exception):
    """Base class for all package errors."""


class SchemaError(GeeError, ValueError):
    """Input table is missing columns or has unparseable cells."""


class DegenerateSupportError(GeeError, ValueError):
    """A covariate has too few distinct values to carry the requested knots."""


class ParameterError(GeeError, ValueError):
    """A correlation parameter lies outside the positive-definite region."""


class CannotEstimateError(GeeError):
    """No within-cluster pairs are available to estimate a correlation."""


class SingularDesignError(GeeError, ArithmeticError):
    def __init__(self, message: str, null_dim: int = 0):
        super().__init__(message)
        self.null_dim = null_dim


class NonConvergenceError(GeeError, ArithmeticError):
    def __init__(self, message: str, theta=None, ee_norm: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.theta = theta
        self.ee_norm = ee_norm
        self.iterations = iterations


class InferenceError(GeeError, ArithmeticError):
    """Spline block of the information matrix is not invertible."""


class InitializationError(GeeError, ValueError):
    """Starting values cannot be formed (e.g. no positive response under a log link)."""


class SelectionError(GeeError):
    """Every candidate in a cross-validation grid failed."""


class StudyError(GeeError):
    """Too many Monte Carlo replications failed."""

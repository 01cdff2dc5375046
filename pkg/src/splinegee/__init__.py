"""Spline-approximated GEE for partially linear additive models on clustered data."""

from splinegee.covariance import Structure, WorkingCovarianceSpec, build_V, estimate_moments, invert_V
from splinegee.data import ClusterData, CsvSchema, Dataset, read_csv, validate, write_csv
from splinegee.errors import (
    CannotEstimateError,
    DegenerateSupportError,
    GeeError,
    InferenceError,
    InitializationError,
    NonConvergenceError,
    ParameterError,
    SchemaError,
    SelectionError,
    SingularDesignError,
    StudyError,
)
from splinegee.estimator import (
    FitConfig,
    FitResult,
    LinkFunction,
    ee_residual,
    fit,
    fit_gee,
    fit_identity,
    get_link,
    initialize,
)
from splinegee.inference import SandwichReport, info_matrix, sandwich, wald_report
from splinegee.selection import CvPlan, CvResult, assign_folds, cross_validate
from splinegee.simulation import Setup, SimulationConfig, StudyReport, run_study, simulate_dataset
from splinegee.spline_basis import AdditiveSplineBasis, BsplineBasis1d, build_additive_basis, build_basis_1d

__version__ = "0.1.0"

__all__ = [
    "AdditiveSplineBasis",
    "assign_folds",
    "BsplineBasis1d",
    "build_additive_basis",
    "build_basis_1d",
    "build_V",
    "CannotEstimateError",
    "ClusterData",
    "CsvSchema",
    "cross_validate",
    "CvPlan",
    "CvResult",
    "Dataset",
    "DegenerateSupportError",
    "ee_residual",
    "estimate_moments",
    "fit",
    "fit_gee",
    "fit_identity",
    "FitConfig",
    "FitResult",
    "GeeError",
    "get_link",
    "InferenceError",
    "info_matrix",
    "InitializationError",
    "initialize",
    "invert_V",
    "LinkFunction",
    "NonConvergenceError",
    "ParameterError",
    "read_csv",
    "run_study",
    "sandwich",
    "SandwichReport",
    "SchemaError",
    "SelectionError",
    "Setup",
    "simulate_dataset",
    "SimulationConfig",
    "SingularDesignError",
    "Structure",
    "StudyError",
    "StudyReport",
    "validate",
    "wald_report",
    "WorkingCovarianceSpec",
    "write_csv",
]

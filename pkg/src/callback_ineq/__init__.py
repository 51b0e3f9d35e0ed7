"""Semiparametric estimation of inequality measures from callback survey data.

Outcomes may be missing not at random; the attempt at which each unit
responded identifies a sequential logistic response model, and the outcome
law is left unspecified (a weighted empirical distribution on respondents).
"""
from .estimator import CallbackEM, FittedDistribution, FullEstimate, fit_em
from .exceptions import (CallbackIneqError, ConfigError, ConstraintError, DataError, DegenerateSampleError,
                         DomainError, EstimationError, NumericError, SelectionError, SingularityError)
from .functionals import gini, quantile, quantile_function, theil, uh_measure
from .inference import (EstimateReport, Sandwich, gini_ci, param_cis, quantile_ci, quantile_function_ci, theil_ci,
                        uh_ci)
from .model import BasisSpec, CallbackDataset, ModelParams, candidate_bases
from .selection import select_basis
from .simulation import OutcomeDist, SimDesign, run_monte_carlo, true_values

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "CallbackDataset", "CallbackEM", "CallbackIneqError", "ConfigError", "ConstraintError",
    "DataError", "DegenerateSampleError", "DomainError", "EstimateReport", "EstimationError", "FittedDistribution",
    "FullEstimate", "ModelParams", "NumericError", "OutcomeDist", "Sandwich", "SelectionError", "SimDesign",
    "SingularityError", "candidate_bases", "fit_em", "gini", "gini_ci", "param_cis", "quantile", "quantile_ci",
    "quantile_function", "quantile_function_ci", "run_monte_carlo", "select_basis", "theil", "theil_ci",
    "true_values", "uh_ci", "uh_measure",
]

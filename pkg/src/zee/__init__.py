"""Additive hazards Z-estimation for random and two-phase samples.

Random-sample (``unit``), inverse-probability-weighted (``ipw``) and
calibrated (``calibrated``) estimators of the regression coefficients, the
baseline cumulative hazard and the subject-specific cumulative hazard,
each with robust and model-based variance estimates.
"""
__version__ = "1.0.0"

from .calibration import CalibrationSolution, solve_gamma
from .data import Dataset, SubjectRecord, WeightScheme, load_csv, validate, write_csv
from .errors import *  # noqa: F401,F403
from .estimators import FitResult, compute_B, fit, fit_lambda, fit_theta, predict_cumhaz
from .risk import CumulativeHazard, RiskTable, StepFunction, at_risk_mean, integrate, zbar
from .variance import (
    InfluenceRows,
    Target,
    VarianceEstimate,
    frechet_apply,
    influence,
    model_based_variance,
    robust_variance,
    variances,
)

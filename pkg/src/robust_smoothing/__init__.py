"""Iterated Gaussian smoothers with Levenberg-Marquardt and line-search safeguards."""

__version__ = "0.1.0"

from .affine_smoother import BACKEND, affine_smooth, kf_predict, kf_update, lm_pseudo_update, rts_backward
from .cost_functions import IplsCostContext, ieks_cost, ipls_cost, lm_cost
from .iterative_smoothers import (
    SMOOTHER_NAMES,
    Armijo,
    GridSearch,
    IterationFailure,
    IterationTrace,
    LMState,
    SmootherConfig,
    gn_iteration,
    initial_estimate,
    line_search_smoother,
    lm_inner_iteration,
    lm_smoother,
    plain_smoother,
    smooth,
)
from .linearization import Cubature, Unscented, linearize_ssm, slr_linearize, taylor_linearize
from .state_space import AffineParams, Gaussian, MeasurementSequence, NonlinearSSM, TrajectoryEstimate, symmetrize_psd

__all__ = [
    "BACKEND",
    "AffineParams",
    "Armijo",
    "Cubature",
    "Gaussian",
    "GridSearch",
    "IplsCostContext",
    "IterationFailure",
    "IterationTrace",
    "LMState",
    "MeasurementSequence",
    "NonlinearSSM",
    "SMOOTHER_NAMES",
    "SmootherConfig",
    "TrajectoryEstimate",
    "Unscented",
    "affine_smooth",
    "gn_iteration",
    "ieks_cost",
    "initial_estimate",
    "ipls_cost",
    "kf_predict",
    "kf_update",
    "line_search_smoother",
    "linearize_ssm",
    "lm_cost",
    "lm_inner_iteration",
    "lm_pseudo_update",
    "lm_smoother",
    "plain_smoother",
    "rts_backward",
    "slr_linearize",
    "smooth",
    "symmetrize_psd",
    "taylor_linearize",
]

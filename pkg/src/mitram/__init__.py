"""Marginally interpretable transformation models for clustered observations."""

from .bases import BasisKind, TransformationBasis, constraint_system, eval_basis, eval_basis_deriv
from .covariance import build_lambda, cholesky_i, reduction_factors, sigma_i
from .data import Dataset, RoleMap, parse_dataset, parse_spec, write_dataset
from .fit import FitOptions, FitResult, fit, initial_params, maximize, observed_information
from .integrate import CubatureRule, integrate_unit_cube
from .likelihood import (
    ClusterData,
    LikelihoodModel,
    ModelSpec,
    ParameterVector,
    loglik_censored,
    loglik_continuous,
    score_continuous,
    total_loglik,
    z_transform,
)
from .links import CLOGLOG, LOGIT, PROBIT, LinkFamily, get_link
from .marginal import MarginalQuery, effect_ci, effect_ci_simulate, marginal_cdf, marginal_effect_scale
from .simulate import Covariate, SimulationDesign, mvn_prob_oracle, simulate

__all__ = [
    "BasisKind", "TransformationBasis", "constraint_system", "eval_basis", "eval_basis_deriv",
    "build_lambda", "cholesky_i", "reduction_factors", "sigma_i",
    "Dataset", "RoleMap", "parse_dataset", "parse_spec", "write_dataset",
    "FitOptions", "FitResult", "fit", "initial_params", "maximize", "observed_information",
    "CubatureRule", "integrate_unit_cube",
    "ClusterData", "LikelihoodModel", "ModelSpec", "ParameterVector",
    "loglik_censored", "loglik_continuous", "score_continuous", "total_loglik", "z_transform",
    "CLOGLOG", "LOGIT", "PROBIT", "LinkFamily", "get_link",
    "MarginalQuery", "effect_ci", "effect_ci_simulate", "marginal_cdf", "marginal_effect_scale",
    "Covariate", "SimulationDesign", "mvn_prob_oracle", "simulate",
]

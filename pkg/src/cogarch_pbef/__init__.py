"""COGARCH(1,1): exact return moments and prediction-based estimation."""

from .errors import CogarchError, ConfigError, MomentError, NumericalError, ParameterError
from .levy import CompoundPoissonNormal, LevyModel, Theta, VarianceGamma, model_from_dict, psi, stationarity_check
from .moments import build_jtable, build_moment_cache, joint_return_moment, marginal_g_moment, stationary_sigma_moment
from .pbef import asymptotic_variance, estimate, m_matrix, predictor_coeffs
from .simulator import ReturnsSample, SimConfig, simulate_path

__version__ = "0.1.0"

__all__ = [
    "CogarchError",
    "ConfigError",
    "MomentError",
    "NumericalError",
    "ParameterError",
    "CompoundPoissonNormal",
    "LevyModel",
    "Theta",
    "VarianceGamma",
    "model_from_dict",
    "psi",
    "stationarity_check",
    "build_jtable",
    "build_moment_cache",
    "joint_return_moment",
    "marginal_g_moment",
    "stationary_sigma_moment",
    "asymptotic_variance",
    "estimate",
    "m_matrix",
    "predictor_coeffs",
    "ReturnsSample",
    "SimConfig",
    "simulate_path",
    "__version__",
]

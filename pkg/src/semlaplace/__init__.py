"""Approximate Bayesian SEM by Laplace, VB location shift, skew-normal marginals and a NORTA copula."""

__version__ = "0.1.0"

from .syntax import parse_model, parse_prior_string  # noqa: E402
from .partable import build_parameter_table  # noqa: E402
from .fit import Fit, FitConfig, fit_model  # noqa: E402
from .posthoc import compare  # noqa: E402

__all__ = [
    "__version__",
    "parse_model",
    "parse_prior_string",
    "build_parameter_table",
    "Fit",
    "FitConfig",
    "fit_model",
    "compare",
]

"""Doss-Sussmann approximation of scalar SDEs driven by rough fractional Brownian motion."""

from .coeffs import Bounds, CoefficientPair, builtin_family
from .constants import ConstantSet, compute_constants
from .fbm import FbmPath, generate
from .flow import PiecewiseFlow, flow_reference, make_flow
from .scheme import SchemeConfig, solve_x_reference, solve_x_scheme, sup_error

__all__ = [
    "Bounds",
    "CoefficientPair",
    "ConstantSet",
    "FbmPath",
    "PiecewiseFlow",
    "SchemeConfig",
    "builtin_family",
    "compute_constants",
    "flow_reference",
    "generate",
    "make_flow",
    "solve_x_reference",
    "solve_x_scheme",
    "sup_error",
]

__version__ = "0.1.0"

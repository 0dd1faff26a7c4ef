"""Solvers and certificates for weakly coupled systems ``-M+(D^2 u_i) = mu f_i(u)``."""

__version__ = "0.1.0"

from .core import EllipticityPair, pucci_minus, pucci_plus  # noqa: E402
from .nonlinearity import Ball, Nonlinearity, SystemSpec, builtin_combustion  # noqa: E402
from .state import SystemState  # noqa: E402

__all__ = ["EllipticityPair", "pucci_plus", "pucci_minus", "Ball", "Nonlinearity",
           "SystemSpec", "builtin_combustion", "SystemState", "__version__"]

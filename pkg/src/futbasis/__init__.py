"""Optimal trading of a basket of futures under stopped Brownian-bridge bases."""

from .model import DerivedModel, InvalidParameters, MarketParams, Preferences, derive, eta_of_t, validate
from .odesolve import NumericalFailure, OdeSolution, Variant, solve

__version__ = "0.1.0"

__all__ = [
    "DerivedModel",
    "InvalidParameters",
    "MarketParams",
    "Preferences",
    "derive",
    "eta_of_t",
    "validate",
    "NumericalFailure",
    "OdeSolution",
    "Variant",
    "solve",
]

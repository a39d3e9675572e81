"""Numerical checks of uniqueness for the martingale problem via mixtures of frozen-coefficient kernels."""

__version__ = "0.1.0"

from .field import CORPUS, CoefficientField, SymPosDefMatrix, apply_generator, corpus_field, eval_field, validate_field
from .functions import TestFunction, corpus_functions
from .integrate import Estimate, IntegrationSpec

__all__ = [
    "__version__",
    "CORPUS",
    "CoefficientField",
    "SymPosDefMatrix",
    "TestFunction",
    "Estimate",
    "IntegrationSpec",
    "apply_generator",
    "corpus_field",
    "corpus_functions",
    "eval_field",
    "validate_field",
]

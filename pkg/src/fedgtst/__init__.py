"""Deterministic federated transfer-learning simulator.

Pretrains small convex (and optionally MLP) models with FedAvg, the
guide-norm statistics-tuning protocol (fedgtst), or a gradient-alignment
baseline (fediir-lite); finetunes on a shifted target domain; and verifies
the recorded traces against round-wise and telescoped loss inequalities.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DimensionError,
    FedgtstError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "DimensionError",
    "FedgtstError",
    "NumericalError",
    "__version__",
]

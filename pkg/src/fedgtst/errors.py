"""Exception hierarchy shared across the engine.

The CLI maps these onto distinct exit codes, so the split matters:
config problems must never masquerade as numerical failures.
"""


class FedgtstError(Exception):
    """Base class for all engine errors."""


class ConfigError(FedgtstError):
    """Invalid configuration or invalid arguments to an operation."""


class DimensionError(ConfigError):
    """Shape mismatch between weights, data, or model spec."""


class NumericalError(FedgtstError):
    """Non-finite values or internal numerical inconsistency during a run."""


class DataFormatError(FedgtstError):
    """Malformed dataset, model, or history file."""

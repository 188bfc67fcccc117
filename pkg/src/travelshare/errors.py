"""Exception hierarchy.

Every exception carries a short ``category`` string which the command line
front end reports in its machine-readable error line.
"""

from __future__ import annotations


class TravelshareError(Exception):
    category = "error"


class DomainError(TravelshareError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    category = "domain"


class ParseError(TravelshareError, ValueError):
    category = "parse"


class DataError(TravelshareError, ValueError):
    """Input data violate an invariant (missing covariate, infeasible cell...)."""

    category = "data"


class LoadError(DataError):
    category = "load"


class ConfigError(TravelshareError, ValueError):
    category = "config"


class NumericError(TravelshareError, ArithmeticError):
    category = "numeric"


class UnsupportedOperationError(TravelshareError, NotImplementedError):
    category = "unsupported"


class ZeroProbabilityWarning(RuntimeWarning):
    """Some chosen alternative has probability zero under the model."""


class EstimationWarning(RuntimeWarning):
    pass

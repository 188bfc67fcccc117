"""Activity-combination choice models for how rail passengers use travel time."""

from .choiceset import (
    DEFAULT_ACTIVITIES,
    DEFAULT_NESTS,
    ChoiceSet,
    Combination,
    NestId,
    count_combinations,
    enumerate_combinations,
)
from .cnl import (
    CnlModel,
    CnlStructure,
    Dataset,
    Observation,
    ParameterVector,
    Predicate,
    UtilitySpec,
    UtilityTerm,
    cnl_probabilities,
    log_likelihood,
)
from .errors import TravelshareError
from .estimation import EstimationResult, EstimationSettings, estimate, fit_statistics, null_log_likelihood

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_ACTIVITIES",
    "DEFAULT_NESTS",
    "ChoiceSet",
    "CnlModel",
    "CnlStructure",
    "Combination",
    "Dataset",
    "EstimationResult",
    "EstimationSettings",
    "NestId",
    "Observation",
    "ParameterVector",
    "Predicate",
    "TravelshareError",
    "UtilitySpec",
    "UtilityTerm",
    "cnl_probabilities",
    "count_combinations",
    "enumerate_combinations",
    "estimate",
    "fit_statistics",
    "log_likelihood",
    "null_log_likelihood",
]

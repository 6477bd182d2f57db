"""Regularization-horizon toolkit for multi-task speech translation at toy scale."""
from .errors import (AnalysisError, ConfigError, DataError, InsufficientDataError, NumericError,
                     RegHorizonError, UsageError)

__version__ = "0.1.0"

__all__ = ["AnalysisError", "ConfigError", "DataError", "InsufficientDataError", "NumericError",
           "RegHorizonError", "UsageError", "__version__"]

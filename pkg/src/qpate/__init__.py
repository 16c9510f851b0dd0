"""Private aggregation of teacher ensembles over classical and hybrid quantum classifiers."""

from .errors import (AccountingError, ConfigurationError, DivergenceError, FormatError,
                     InfeasibleEpsilonError, QPateError, UsageError)

__version__ = "0.1.0"

"""Exception hierarchy shared by every qpate module."""


class QPateError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(QPateError, ValueError):
    """Shapes or hyperparameters that cannot work together."""


class UsageError(QPateError, ValueError):
    """A call made with invalid arguments or in the wrong order."""


class FormatError(QPateError, ValueError):
    """Malformed on-disk data (IDX files, checkpoints, config files)."""


class AccountingError(QPateError):
    """Privacy budget violated or unreachable."""


class InfeasibleEpsilonError(AccountingError):
    """No noise scale reaches the requested epsilon."""

    def __init__(self, message, floor):
        super().__init__(message)
        self.floor = floor


class DivergenceError(QPateError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch

"""Exception hierarchy shared across the package."""


class EivscError(Exception):
    """Base class for all package errors."""


class DimensionError(EivscError, ValueError):
    pass


class EmptyInputError(EivscError, ValueError):
    pass


class NotPSDError(EivscError, ValueError):
    """A covariance matrix has a clearly negative eigenvalue."""


class UnboundedProblemError(EivscError):
    """The regularized objective is unbounded below on the constraint set."""


class InfeasibleError(EivscError, ValueError):
    pass


class CSVFormatError(EivscError, ValueError):
    """Malformed panel CSV. ``row`` and ``col`` are 1-based file coordinates."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class ExperimentError(EivscError):
    pass


class ConfigError(EivscError, ValueError):
    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path

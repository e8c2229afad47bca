"""Exception hierarchy shared across the package."""


class EvdroError(Exception):
    """Base class for all package errors."""


class DimensionError(EvdroError, ValueError):
    pass


class DomainError(EvdroError, ValueError):
    """An input lies outside the domain of a function (e.g. a nonpositive denominator)."""


class InfeasibleDispatchError(EvdroError):
    """A dispatch sends more vehicles out of a region than are present."""


class ConvergenceError(EvdroError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class NonStationaryError(EvdroError):
    pass


class InfeasibleProblemError(EvdroError):
    """The assembled program is structurally infeasible."""


class SolverError(EvdroError):
    pass


class DataError(EvdroError):
    pass


class ConfigError(EvdroError):
    pass

"""Exception types raised across the package."""


class PQKDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PQKDError, ValueError):
    """Invalid shapes, sizes or hyperparameters."""


class UsageError(PQKDError, ValueError):
    """An API was called in a state or with arguments it does not accept."""


class CapabilityError(PQKDError):
    """The request is valid but exceeds what the simulator will compute."""


class FormatError(PQKDError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class DataError(PQKDError, ValueError):
    """Labels or samples fall outside their declared range."""


class FitError(PQKDError, ValueError):
    """A regression was requested with too little usable data."""


class NumericalError(PQKDError, ArithmeticError):
    """A linear-algebra routine met an ill-conditioned problem."""


class DivergenceError(PQKDError, FloatingPointError):
    """Training produced a non-finite loss."""

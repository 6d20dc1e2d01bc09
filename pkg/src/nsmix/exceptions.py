"""Exception types shared across the package."""


class NSMixError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NSMixError, ValueError):
    """Invalid parameters or configuration values."""


class GridMismatchError(NSMixError, ValueError):
    """Fields defined on different wave grids were combined."""


class NumericalFailure(NSMixError, ArithmeticError):
    """A numerical procedure diverged or failed to converge."""


class IntegrationError(NumericalFailure):
    """Time integration blew up (non-finite or huge coefficients)."""

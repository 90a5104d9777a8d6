"""Exception types raised across the package."""


class NeumannLBError(Exception):
    """Base class for all package errors."""


class DomainError(NeumannLBError, ValueError):
    """A point or parameter lies outside the domain of an operation."""


class ConfigError(NeumannLBError, ValueError):
    """Invalid grid or scenario configuration."""


class DataError(NeumannLBError, ValueError):
    """Grid function contains non-finite or mis-shaped data."""


class PreconditionError(NeumannLBError, ValueError):
    """Inputs violate a documented precondition of a check."""


class ResolutionError(NeumannLBError, ValueError):
    """The grid is too coarse to resolve the requested collar."""

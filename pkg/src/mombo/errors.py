"""Exception types shared across the package."""


class MomboError(Exception):
    """Base class for all package errors."""


class DimensionError(MomboError, ValueError):
    """Raised when array shapes do not chain or do not match."""


class TrainingError(MomboError, RuntimeError):
    """Raised when an optimisation step produces non-finite values."""


class InsufficientSamplesError(MomboError, ValueError):
    """Raised when a statistic needs more samples than were given."""


class UndefinedBoundError(MomboError, ValueError):
    """Raised when a bound is evaluated outside its domain."""


class ConfigError(MomboError, ValueError):
    """Raised for invalid run configurations."""

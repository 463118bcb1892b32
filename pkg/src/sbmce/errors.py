"""Exception types shared across the package."""


class SbmceError(Exception):
    """Base class for all package errors."""


class ParameterError(SbmceError, ValueError):
    """An argument is outside its valid range."""


class DimensionError(SbmceError, ValueError):
    """Array shapes or antenna counts do not agree."""


class FormatError(SbmceError, ValueError):
    """A binary file is truncated, corrupt, or has the wrong magic/version."""


class DomainError(SbmceError, ValueError):
    """A dataset is in the wrong domain (spatial vs. beamspace)."""


class NumericalError(SbmceError, ArithmeticError):
    """A numerical routine failed (non-finite values, failed factorization)."""


class ConfigError(SbmceError, ValueError):
    """A run configuration is missing, malformed, or inconsistent."""

class OdometryError(Exception):
    """Base class for all errors raised by this package."""


class AngleNearPi(OdometryError, ValueError):
    pass


class DomainError(OdometryError, ValueError):
    pass


class EmptyObservation(OdometryError, ValueError):
    pass


class DegenerateSystem(OdometryError, ArithmeticError):
    """The normal equations leave at least one direction unconstrained."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NoCorrespondences(OdometryError):
    pass


class EmptyScan(OdometryError, ValueError):
    pass


class DataError(OdometryError):
    """Input files are missing, truncated or inconsistent."""


class MalformedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class TooShort(OdometryError, ValueError):
    pass


class ConfigError(OdometryError, ValueError):
    pass

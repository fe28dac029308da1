"""Exception hierarchy shared by all modules."""


class EceTrialError(Exception):
    """Base class for library errors."""


class SchemaError(EceTrialError):
    """A document is missing a required field or carries an unknown one."""


class ParseError(EceTrialError, ValueError):
    """Malformed tabular input (bad CSV shape, non-numeric values)."""


class EmptyEceError(EceTrialError):
    """No record is concurrently eligible for both arms of the comparison."""


class PositivityError(EceTrialError):
    """A restricted analysis set has zero selection probability for an arm."""

    def __init__(self, message, zkey=None, arm=None):
        super().__init__(message)
        self.zkey = zkey
        self.arm = arm


class InsufficientDataError(EceTrialError):
    """Too few records to fit a working model (or a stratum block of one)."""


class DegenerateArmError(EceTrialError):
    """An arm, or an arm within a stratum, has too few observations."""


class DegenerateVarianceError(EceTrialError):
    """The variance of the requested contrast is not strictly positive."""


class ConfigError(EceTrialError):
    """Invalid simulation configuration."""

"""Exception hierarchy shared across the package."""


class EamError(Exception):
    """Base class for all errors raised by eamap."""


class DimensionError(EamError, ValueError):
    pass


class NumericError(EamError, ArithmeticError):
    pass


class RangeError(EamError, ValueError):
    pass


class EmptyCalibrationError(EamError, ValueError):
    pass


class CounterOverflowError(EamError, OverflowError):
    pass


class TrainingError(EamError, RuntimeError):
    pass


class FormatError(EamError, ValueError):
    """Base class for binary file format problems."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, message, offset=None, tensor=None):
        super().__init__(message)
        self.offset = offset
        self.tensor = tensor


class CountMismatchError(FormatError):
    pass


class ConfigError(EamError, ValueError):
    pass

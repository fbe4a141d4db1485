"""
TensorFact - Error Types
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class TensorFactError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(TensorFactError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(TensorFactError, ValueError):
    """An argument is outside its documented domain."""


class NumericError(TensorFactError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class StateError(TensorFactError, RuntimeError):
    """An operation was requested in a state that forbids it."""


class ConfigError(TensorFactError):
    """A configuration file or value is invalid."""


class DataError(TensorFactError):
    """A dataset, manifest or interchange file is malformed."""


class WeightFormatError(TensorFactError):
    """A weight file cannot be parsed."""


class BadMagicError(WeightFormatError):
    pass


class VersionError(WeightFormatError):
    def __init__(self, found, expected):
        super().__init__(f"unsupported weight file version {found} (expected {expected})")
        self.found = found
        self.expected = expected


class TruncationError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        error: Exception raised by a subcommand

    Returns:
        int: Process exit code
    """
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (TensorFactError, OSError)):
        return EXIT_DATA
    return EXIT_USAGE

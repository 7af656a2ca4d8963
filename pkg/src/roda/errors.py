"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RodaError(Exception):
    exit_code = 1


class ConfigError(RodaError, ValueError):
    exit_code = 2


class ShapeError(RodaError, ValueError):
    exit_code = 4


class SizeError(RodaError, ValueError):
    exit_code = 4


class FormatError(RodaError, ValueError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LabelError(RodaError, ValueError):
    exit_code = 4


class NumericError(RodaError, ArithmeticError):
    exit_code = 3


class ValidationError(RodaError, ValueError):
    exit_code = 4

"""Exception types raised across the package."""


class GlocalError(Exception):
    """Base class for all package errors."""


class DimensionError(GlocalError, ValueError):
    pass


class DomainError(GlocalError, ValueError):
    pass


class DegenerateInputError(GlocalError, ValueError):
    pass


class RangeError(GlocalError, IndexError):
    pass


class NumericError(GlocalError, ArithmeticError):
    pass


class EvaluationError(GlocalError, ArithmeticError):
    pass


class ParseError(GlocalError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(GlocalError, ValueError):
    pass


class ConfigError(GlocalError, ValueError):
    pass


class IntegrityError(GlocalError, ValueError):
    pass


class AlignmentError(GlocalError, ValueError):
    pass

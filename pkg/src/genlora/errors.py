"""Exception types shared across the package."""


class GenLoraError(Exception):
    """Base class for all package errors."""


class ShapeError(GenLoraError, ValueError):
    """Operand shapes are not conformable."""


class ParameterError(GenLoraError, ValueError):
    """An argument is outside its documented domain."""


class NumericalError(GenLoraError, ArithmeticError):
    """An iterative method failed to converge or produced non-finite values."""


class FormatError(GenLoraError, ValueError):
    """A file on disk does not follow the expected layout."""


class SchemaError(GenLoraError, ValueError):
    """A configuration document failed validation."""

"""Exception hierarchy shared by every module."""


class SetVecError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SetVecError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(SetVecError, ValueError):
    """Input lies outside the domain of an operation (empty bag, negative weight, ...)."""


class UsageError(SetVecError, ValueError):
    """Invalid combination of arguments or configuration values."""


class NumericError(SetVecError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class FormatError(SetVecError, ValueError):
    """A binary or text file does not follow its declared format."""


class IncompatibilityError(SetVecError, ValueError):
    """A checkpoint or dataset does not match the requested configuration."""

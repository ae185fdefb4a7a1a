"""Exception hierarchy shared by the library and the CLI exit-code contract."""


class EegSplatError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ValidationError(EegSplatError, ValueError):
    """Input data or parameters violate a documented constraint."""

    exit_code = 2


class LoadError(ValidationError):
    """A file could not be parsed into the expected structure."""


class TransportError(EegSplatError):
    """Network I/O with an external service failed."""

    exit_code = 3


class NumericError(EegSplatError, ArithmeticError):
    """A computation produced a degenerate or non-finite result."""

    exit_code = 4

"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 3, ``NumericalError`` -> 4.
"""


class CccaeError(Exception):
    """Base class for package errors."""


class DataError(CccaeError, ValueError):
    """Malformed input data or file (bad shape, bad format, missing file)."""


class FormatError(DataError):
    """A binary or text file could not be parsed."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class UnsupportedOperation(CccaeError, ValueError):
    pass


class NumericalError(CccaeError, ArithmeticError):
    """Non-finite values appeared during a computation."""

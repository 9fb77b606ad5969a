"""Exception types shared across the package."""


class SiarankError(Exception):
    """Base class for package errors."""


class DataError(SiarankError):
    """Malformed or inconsistent input data (bad TSV row, invalid label, ...)."""


class NumericError(SiarankError):
    """Non-finite values encountered during numeric computation or training."""


class MissingKeyError(SiarankError, KeyError):
    """A requested document key is not present in an embedding store."""

    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return Exception.__str__(self)

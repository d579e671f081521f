"""Exception types shared across the package.

The CLI maps these to exit codes: ``InputError`` -> 1, ``NumericError`` -> 2.
"""


class HSGTError(Exception):
    """Base class for package errors."""


class InputError(HSGTError, ValueError):
    """Malformed input: bad ids, shapes, config values or files."""


class NumericError(HSGTError, ArithmeticError):
    """A numeric contract was violated (non-finite values, empty softmax rows)."""

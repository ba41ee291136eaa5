"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DataError`` -> 2,
``InvariantViolation`` -> 3. Anything else is an internal failure.
"""


class CascadeError(Exception):
    """Base class for package errors."""


class DataError(CascadeError, ValueError):
    """Bad input data, bad parameters, or an unreadable file."""


class ModelFormatError(DataError):
    """A model file could not be parsed or has an unsupported version."""


class InvariantViolation(CascadeError):
    """A structural or numerical invariant failed to hold."""

"""Exception types shared across the package.

Both derive from ValueError so generic callers can catch them uniformly; the
CLI maps them to exit code 2 (data/numeric error) as opposed to usage errors.
"""


class DataError(ValueError):
    """Invalid or inconsistent input data, shapes or identifiers."""


class NumericError(DataError):
    """Non-finite values or numerically invalid operations."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss; message carries step and batch ids."""

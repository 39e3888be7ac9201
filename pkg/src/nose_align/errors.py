"""Error types shared across the package.

The CLI maps these onto process exit codes: usage problems -> 1,
data/format problems -> 2, numeric failures -> 3.
"""


class NoseError(Exception):
    """Base class for package errors."""


class UsageError(NoseError):
    """Bad command line invocation."""

    exit_code = 1


class DataFormatError(NoseError):
    """Malformed or inconsistent input files, manifests, or configs."""

    exit_code = 2


class NumericError(NoseError):
    """Non-finite values or numerically impossible requests."""

    exit_code = 3


class EmptyPositiveSetError(NumericError):
    """Every anchor row has zero positive weight; the loss is undefined."""

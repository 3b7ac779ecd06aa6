"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto process exit codes: usage errors exit 2, data
errors exit 3, numeric failures exit 4.
"""


class HydrorangeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(HydrorangeError):
    """Bad arguments, unknown config keys, invalid flag combinations."""

    exit_code = 2


class DataError(HydrorangeError):
    """Unreadable or inconsistent input data, shape mismatches."""

    exit_code = 3


class NumericError(HydrorangeError):
    """Non-finite values where finite ones are required (diverged training,
    NaN activations)."""

    exit_code = 4

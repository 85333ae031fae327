"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes: usage errors exit 2, data and
IO errors exit 3, numeric failures exit 4.
"""


class ChromafuseError(Exception):
    """Base class for all package errors."""


class UsageError(ChromafuseError):
    """The caller violated an API contract (bad argument, wrong shape, unknown tag)."""


class DataError(ChromafuseError):
    """Input data is malformed or outside the mathematical domain of an operation."""


class NumericError(ChromafuseError):
    """A computation produced non-finite values (e.g. training loss diverged)."""

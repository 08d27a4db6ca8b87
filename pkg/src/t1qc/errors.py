"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class T1qcError(Exception):
    """Base class for all toolkit errors."""


class UsageError(T1qcError):
    """Invalid invocation: bad flags, unknown presets, malformed config."""


class DataError(T1qcError):
    """Unusable input data: missing or malformed files, bad manifests,
    empty or inconsistent masks."""


class NumericalError(T1qcError):
    """A computation produced non-finite or degenerate values."""

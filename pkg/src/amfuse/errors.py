"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: UsageError -> 1, DataError/FormatError -> 2.
"""


class AmfuseError(Exception):
    """Base class for all toolkit errors."""


class UsageError(AmfuseError):
    """Caller misuse: bad argument combinations, wrong call sequence."""


class DimensionError(UsageError):
    """Shape mismatch; message names the offending axis."""


class ConfigurationError(UsageError):
    """Invalid configuration value (even pooling size, bad gain, ...)."""


class DataError(AmfuseError):
    """Invalid data content (out-of-range label, nonpositive depth, ...)."""


class FormatError(AmfuseError):
    """Malformed file or archive (bad magic, truncated payload, index mismatch)."""

"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (1 validation, 2 numeric, 3 IO).
"""


class GCtxError(Exception):
    """Base class for all package errors."""


class DimensionError(GCtxError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(GCtxError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(GCtxError, ValueError):
    """A configuration record violates one of its invariants."""


class UsageError(GCtxError, ValueError):
    """An API was called in a way its contract does not allow."""


class IntegrityError(GCtxError, IOError):
    """A serialized file failed its checksum or is truncated."""


class VersionError(GCtxError, IOError):
    """A serialized file was written by an unsupported format version."""


class MissingFileError(GCtxError, FileNotFoundError):
    """A file referenced by a manifest or command does not exist."""

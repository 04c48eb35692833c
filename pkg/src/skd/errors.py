"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
IntegrityError -> 4.
"""


class SkdError(Exception):
    """Base class for all package errors."""


class ConfigError(SkdError):
    """Invalid configuration: unknown keys, bad values, unsupported variants."""


class ShapeError(SkdError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(SkdError):
    """Base class for dataset problems."""


class MissingFilesError(DataError):
    """Expected dataset files are absent."""


class CorruptImageError(DataError):
    """An image file exists but cannot be decoded."""


class CountMismatchError(DataError):
    """Number of items found on disk disagrees with the declared split size."""


class IntegrityError(SkdError):
    """Run store inconsistency, e.g. digest collision with differing config."""

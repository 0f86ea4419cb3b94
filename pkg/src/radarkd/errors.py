"""Exception types shared across the pipeline.

Every error raised deliberately by this package derives from RadarKdError,
so CLI entry points can map failures onto exit codes without guessing.
"""


class RadarKdError(Exception):
    """Base class for all errors raised by radarkd."""


class ConfigError(RadarKdError):
    """Invalid configuration, shapes, or arguments."""


class NumericError(RadarKdError):
    """A numeric invariant was violated (NaN/Inf, divergence)."""


class UnusableDataset(RadarKdError):
    """The dataset cannot support training (e.g. no positive bins at all)."""


class BelowCriticalSpeed(RadarKdError):
    """Host speed is below the minimum required for temporal accumulation."""


class FileFormatError(RadarKdError):
    """Base class for binary/JSON file problems."""


class MagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FileFormatError):
    """File carries an unsupported format version."""


class TruncationError(FileFormatError):
    """File is shorter or longer than its declared contents."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the file contents."""


class SchemaError(FileFormatError):
    """Declared fields are inconsistent or out of the valid domain."""

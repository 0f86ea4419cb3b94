"""radarkd: teacher-student distillation for radar debris detection.

A classical signal-processing teacher labels synthetic range-azimuth
spectra frame by frame; a small convolutional student is trained on those
labels and ends up both faster and usable in regimes where the teacher
must abstain (low host speed, short history).
"""

from .errors import (
    BelowCriticalSpeed,
    ChecksumError,
    ConfigError,
    FileFormatError,
    MagicError,
    NumericError,
    RadarKdError,
    SchemaError,
    TruncationError,
    UnusableDataset,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "BelowCriticalSpeed",
    "ChecksumError",
    "ConfigError",
    "FileFormatError",
    "MagicError",
    "NumericError",
    "RadarKdError",
    "SchemaError",
    "TruncationError",
    "UnusableDataset",
    "VersionError",
    "__version__",
]

"""Exception hierarchy shared across the package."""


class VoxelXaiError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(VoxelXaiError):
    pass


class SingularTransformError(VoxelXaiError):
    pass


class UndefinedCorrelationError(VoxelXaiError):
    """Pearson correlation of a constant series is undefined."""


class VolumeFormatError(VoxelXaiError):
    """Malformed volume file (bad magic, truncation, dims mismatch)."""


class ConfigError(VoxelXaiError):
    pass


class MissingArtifactError(VoxelXaiError):
    """A pipeline stage needs an artifact an earlier stage has not produced."""

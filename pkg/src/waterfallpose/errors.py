"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is invalid (bad window/dilation, indivisible size, ...)."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf values."""


class AnnotationError(ValueError):
    """A keypoint annotation violates the schema (e.g. visible joint out of frame)."""


class CheckpointError(RuntimeError):
    """Checkpoint could not be written or read back."""


class ChecksumError(CheckpointError):
    """Stored tensor bytes do not match their manifest CRC."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""

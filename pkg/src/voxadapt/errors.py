"""Exception hierarchy shared across the package."""


class VoxAdaptError(Exception):
    """Base class for all package-specific failures."""


class DegenerateRangeError(VoxAdaptError):
    """Intensity operation on a volume without usable dynamic range."""


class ShapeMismatchError(VoxAdaptError):
    """Two volumes/arrays that must share a shape do not."""


class VolumeFormatError(VoxAdaptError):
    """Base class for on-disk volume format failures."""


class MagicMismatchError(VolumeFormatError):
    """File does not start with the expected magic/version bytes."""


class TruncatedPayloadError(VolumeFormatError):
    """File ends before the declared header or voxel payload."""


class PayloadLengthError(VolumeFormatError):
    """Payload length disagrees with the shape declared in the header."""


class HeaderError(VolumeFormatError):
    """Header JSON is malformed or carries unsupported fields."""


class InfeasibleBoxError(VoxAdaptError):
    """No axis-aligned box satisfies the requested volume fraction."""


class UndefinedSurfaceMetricError(VoxAdaptError):
    """Surface metric requested for an empty surface set."""


class NoConditioningMasksError(VoxAdaptError):
    """Generation stage has no masks to condition on."""


class ConfigError(VoxAdaptError):
    """Run configuration is missing, malformed, or out of bounds."""

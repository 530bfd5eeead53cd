"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A shape, option, or architecture setting is inconsistent."""


class PlanningError(ConfigError):
    """The requested parameter budget cannot be met."""


class ContainerError(ValueError):
    """A serialized container is corrupt, truncated, or incompatible."""


class TruncatedContainerError(ContainerError):
    """The byte stream ends before the declared payload does."""


class ChecksumError(ContainerError):
    """Stored checksum does not match the payload bytes."""


class VersionError(ContainerError):
    """The container was written by an unknown format version."""


class FrameIOError(ValueError):
    """A frame store is malformed (missing index, size mismatch, bad header)."""

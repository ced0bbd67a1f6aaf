"""Exception hierarchy shared across the package."""


class CorrsegError(Exception):
    """Base class for all corrseg errors."""


class PreconditionError(CorrsegError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(CorrsegError):
    """A structural setting (network/build/CLI) is invalid or unsupported."""


class DataValidationError(CorrsegError):
    """Input data failed a validity check (bad labels, constant volume, ...)."""


class VolumeIOError(CorrsegError):
    """Base class for volume-file read/write failures."""


class VolumeFormatError(VolumeIOError):
    """File does not start with the expected magic bytes."""


class VolumeVersionError(VolumeIOError):
    """File declares an unsupported format version."""


class VolumeTruncatedError(VolumeIOError):
    """File ends before the payload promised by its header."""


class VolumeShapeError(VolumeIOError):
    """Header dimensions are invalid or disagree with the payload size."""


class CheckpointError(CorrsegError):
    """Checkpoint file is malformed or incompatible with the network."""


class TrainingDivergedError(CorrsegError):
    """Loss or a gradient became non-finite during optimization."""

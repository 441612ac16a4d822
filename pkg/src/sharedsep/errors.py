"""Exception hierarchy shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class DegenerateReferenceError(InvalidInputError):
    """Reference signals do not span a full-rank subspace."""


class WavError(ValueError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class ChannelCountError(WavError):
    pass


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was produced during an epoch."""


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; maps to CLI exit code 2."""

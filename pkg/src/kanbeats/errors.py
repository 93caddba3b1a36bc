"""Exception hierarchy. The CLI maps each family onto a process exit code."""


class KanBeatsError(Exception):
    exit_code = 1


class ConfigError(KanBeatsError, ValueError):
    exit_code = 2


class DataError(KanBeatsError, ValueError):
    exit_code = 3


class NumericError(KanBeatsError, FloatingPointError):
    exit_code = 4


class CheckpointError(KanBeatsError):
    exit_code = 3


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass

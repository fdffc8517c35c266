"""Shared exception types."""


class ExecutionError(RuntimeError):
    """A graph executed into an invalid state (bad index, no data, ...)."""


class CorruptCheckpointError(RuntimeError):
    """Checkpoint file failed its integrity checks."""


class NoCheckpointError(RuntimeError):
    """An operation required a trained model but no checkpoint exists."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""


class ConfigError(ValueError):
    """A job configuration failed validation; message names the field."""

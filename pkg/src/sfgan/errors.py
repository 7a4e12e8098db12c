"""Exception hierarchy shared across the package."""


class SceneFlowError(Exception):
    """Base class for every error raised by sfgan."""


class ShapeError(SceneFlowError, ValueError):
    """Array dimensions disagree with a declared contract."""


class NonFiniteError(SceneFlowError, ValueError):
    """NaN or Inf found where only finite values are allowed."""


class FormatError(SceneFlowError, ValueError):
    """A file payload could not be decoded.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TruncatedError(FormatError):
    """Payload shorter than the header promised."""


class UnsupportedFormatError(SceneFlowError, ValueError):
    """Requested encoding is not representable in the target format."""


class CheckpointMismatchError(SceneFlowError):
    """Checkpoint was written for a different network configuration."""


class ConfigError(SceneFlowError, ValueError):
    """Invalid configuration document or field value."""


class TrainingHalted(SceneFlowError, RuntimeError):
    """Training stopped because a loss or parameter became non-finite."""

    def __init__(self, message, step, last_checkpoint=None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        if last_checkpoint is not None:
            message = f"{message}; last good checkpoint: {last_checkpoint}"
        super().__init__(f"step {step}: {message}")

"""Domain exceptions raised across the package."""


class ShapeError(ValueError):
    """Tensor extents or sequence lengths violate an operation's contract."""


class EmptyMaskError(ValueError):
    """A mask that must contain foreground has none."""


class UnknownDatasetError(ValueError):
    pass


class SamplerError(RuntimeError):
    """The episode sampler exhausted its attempts without a valid episode."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointMismatchError(ValueError):
    """Checkpoint arrays do not match the model built from the config."""


class UsageError(ValueError):
    """Invalid command-line usage."""

"""Exception types shared across the package."""


class SlimnnError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SlimnnError):
    """A spec, plan, or config file describes something unbuildable."""


class ShapeMismatchError(SlimnnError):
    """An input does not fit the layer it was fed to."""


class UnsupportedLayerError(SlimnnError):
    """An operation was asked to handle a layer type it does not support."""


class PruningError(SlimnnError):
    """A pruning request violates the monotone-sparsity contract."""


class TrainingDivergedError(SlimnnError):
    """Loss became non-finite during training.

    Carries the epoch at which divergence was detected and the trajectory
    recorded so far (may be None when raised below the training loop).
    """

    def __init__(self, message, epoch=None, trajectory=None):
        super().__init__(message)
        self.epoch = epoch
        self.trajectory = trajectory


class IdxFormatError(SlimnnError):
    """An IDX file failed to parse; `offset` is the failing byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class DataError(SlimnnError):
    """A dataset violates a precondition (empty, too small, wrong labels)."""

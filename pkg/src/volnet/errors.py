"""Exception hierarchy shared by every volnet module."""


class VolnetError(Exception):
    """Base class for all errors raised by volnet."""


class ShapeError(VolnetError, ValueError):
    """Operand shapes are inconsistent."""


class DegenerateShapeError(ShapeError):
    """An output axis would have size < 1."""


class InsufficientBatchError(VolnetError, ValueError):
    """Batch statistics need at least two elements per channel."""


class LabelError(VolnetError, ValueError):
    """Class label outside the valid range."""


class ConfigError(VolnetError, ValueError):
    """Invalid model, training or run configuration."""


class ArchitectureMismatchError(ConfigError):
    """Source and target architectures differ."""


class StaleCacheError(VolnetError, ValueError):
    """A backward cache does not belong to the gradient it is paired with."""


class InferenceTraceError(VolnetError, ValueError):
    """Parameter gradients were requested from an inference-mode trace."""


class MissingGradientError(VolnetError, RuntimeError):
    """A trainable parameter has no gradient at optimizer time."""


class TrainingDivergedError(VolnetError, RuntimeError):
    """The loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class DataError(VolnetError):
    """Problems with input data, manifests or splits."""


class EmptySplitError(DataError, ValueError):
    pass


class TooFewSubjectsError(DataError, ValueError):
    pass


class ConstantVolumeError(DataError, ValueError):
    pass


class BlobOutOfBoundsError(DataError, ValueError):
    pass


class SingleClassError(VolnetError, ValueError):
    """AUC needs at least one positive and one negative label."""


class FormatError(DataError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    pass


class PairedFileUnsupportedError(FormatError):
    pass


class ShapeConflictError(FormatError, ShapeError):
    """A stored tensor does not fit the model it is loaded into."""

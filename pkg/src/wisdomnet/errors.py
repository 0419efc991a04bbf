"""Exception hierarchy shared across the package."""


class WisdomNetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(WisdomNetError, ValueError):
    """Operand shapes do not fit together."""


class NonFiniteError(WisdomNetError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class NormalizationError(WisdomNetError, ValueError):
    """Probability rows do not sum to one."""


class WeightFormatError(WisdomNetError):
    """A weight file is malformed, truncated or has the wrong magic bytes."""


class VersionMismatchError(WeightFormatError):
    """A weight file was written by an incompatible format version."""


class ManifestError(WisdomNetError):
    """An ensemble directory or corpus manifest is inconsistent."""


class ImageDecodeError(WisdomNetError):
    """An image file could not be read or decoded."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class TrainingDivergedError(WisdomNetError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, epoch, batch, detail="loss is not finite"):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch

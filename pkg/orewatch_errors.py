"""Exceptions raised by the orewatch modules."""


class OrewatchError(Exception):
    """Base class for every error raised by the pipeline."""


class DimensionError(OrewatchError):
    """Shapes, band counts or wavelength grids do not line up."""


class RangeError(OrewatchError):
    """A requested wavelength lies outside the source grid."""


class CalibrationError(OrewatchError):
    """The calibration panel cannot be used (bad region or non-positive mean)."""


class DegenerateVectorError(OrewatchError):
    """A zero-norm vector was passed where a direction is required."""


class FormatError(OrewatchError):
    """A header, data file or parameter container could not be parsed.

    Attributes:
        offset: Byte offset in the offending file, or None if unknown
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(OrewatchError):
    """A backward pass was given a cache that does not belong to it."""


class DivergenceError(OrewatchError):
    """Training produced a non-finite loss."""

    def __init__(self, where, epoch, loss):
        super().__init__(f"non-finite loss {loss} in {where} at epoch {epoch}")
        self.where = where
        self.epoch = epoch


class ClusterError(OrewatchError):
    """Clustering or confident-sample extraction cannot proceed."""


class SplitError(OrewatchError):
    """A train/validation split asks for more samples than exist."""


class LabelError(OrewatchError):
    """Class labels are out of range or not dense."""


class TransferError(OrewatchError):
    """Pretrained weights cannot be transferred to the requested network."""


class ConfigError(OrewatchError):
    """The pipeline configuration is invalid."""


class DependencyError(OrewatchError):
    """An upstream stage artifact is missing."""

    def __init__(self, stage, missing, run_first):
        super().__init__(
            f"stage '{stage}' needs {missing}; run '{run_first}' first"
        )
        self.stage = stage
        self.run_first = run_first


class TrainingError(OrewatchError):
    """Training finished without error but left an unusable network (every code unit dead)."""

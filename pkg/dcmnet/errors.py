"""
DCMNet Error Types

One exception hierarchy for the whole package. The CLI maps these onto exit codes.
"""


class DCMNetError(Exception):
    """Base class for every error raised by dcmnet."""


class ShapeError(DCMNetError, ValueError):
    """Tensor extents do not fit the operation."""


class NonFiniteError(DCMNetError, FloatingPointError):
    """A NaN or Inf tried to enter a Tensor."""


class TapeError(DCMNetError, RuntimeError):
    """Backward pass requested on something the tape cannot differentiate."""


class ConfigError(DCMNetError, ValueError):
    """Invalid model, training or run configuration."""


class DatasetError(DCMNetError, ValueError):
    """Problem with scene data or the samples derived from it."""


class DatasetFormatError(DatasetError):
    """File is not a DYNF dataset."""


class DatasetVersionError(DatasetFormatError):
    """DYNF file written by an unsupported format version."""


class DatasetTruncatedError(DatasetFormatError):
    """DYNF file ends before its declared payload."""


class CheckpointError(DCMNetError, ValueError):
    """DYNM checkpoint is malformed or does not match the model/dataset."""


class OutputPathError(ConfigError):
    """An output path cannot be written (missing permission, parent is a file, ...)."""

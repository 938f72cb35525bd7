"""segcal: a desk-scale few-shot segmentation lab.

A hybrid model that tempers an attention-based pixel matcher with the
conservative predictions of a frozen prototype classifier, plus the
synthetic-episode benchmark, autodiff core, and metrics needed to study it
end to end on a CPU in seconds.
"""

from .errors import (
    ConfigError,
    ConfigMismatchError,
    FormatError,
    InvalidValueError,
    MagicMismatchError,
    PayloadRangeError,
    SegcalError,
    ShapeMismatchError,
    TapeError,
    TrainingDivergedError,
    TruncationError,
    UnsupportedVersionError,
)
from .tensor import Tape, Tensor, backward, finite_diff_grad, relative_error

__all__ = [
    "ConfigError",
    "ConfigMismatchError",
    "FormatError",
    "InvalidValueError",
    "MagicMismatchError",
    "PayloadRangeError",
    "SegcalError",
    "ShapeMismatchError",
    "TapeError",
    "TrainingDivergedError",
    "TruncationError",
    "UnsupportedVersionError",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_grad",
    "relative_error",
]

__version__ = "0.1.0"

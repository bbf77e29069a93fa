"""slidemil: multiple-instance learning over precomputed tile features.

Library and CLI for slide-level binary classification from bags of tile
feature vectors: three MIL models (mean pooling, extreme-score
aggregation, gated attention), an Adam training loop, repeated and
center-grouped cross-validation with grid search, DeLong AUC inference,
and per-tile score export.
"""

__version__ = "0.1.0"

from .bagstore import Bag, Dataset, load_dataset, read_bag, write_bag
from .errors import (
    CorruptionError,
    FormatError,
    NumericError,
    SlideMilError,
    ValidationError,
)
from .models import ModelConfig, Prediction, forward, init_params
from .trainer import TrainConfig, train

__all__ = [
    "Bag",
    "Dataset",
    "ModelConfig",
    "Prediction",
    "TrainConfig",
    "SlideMilError",
    "ValidationError",
    "FormatError",
    "CorruptionError",
    "NumericError",
    "forward",
    "init_params",
    "load_dataset",
    "read_bag",
    "train",
    "write_bag",
    "__version__",
]

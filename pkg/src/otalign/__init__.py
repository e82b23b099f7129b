"""Coupling-weighted optimal-transport domain adaptation on fixed embeddings."""

__version__ = "0.1.0"

from .datagen import Dataset, ShiftConfig, generate_shift_benchmark, load_features, save_features
from .estimator import OTAlignClassifier
from .exceptions import (
    ConfigError,
    DegenerateAlignmentError,
    InputError,
    OTAlignError,
    ParseError,
    UsageError,
)
from .metrics import TrialSet, c_avg, equal_error_rate
from .nn import AdaptationNetwork
from .pipeline import MetricsReport, RunHistory, TrainConfig, adapt, evaluate, pretrain_source
from .transport import AlignConfig, exact_ot_oracle, pot_align_loss, sinkhorn

__all__ = [
    "AdaptationNetwork",
    "AlignConfig",
    "ConfigError",
    "Dataset",
    "DegenerateAlignmentError",
    "InputError",
    "MetricsReport",
    "OTAlignClassifier",
    "OTAlignError",
    "ParseError",
    "RunHistory",
    "ShiftConfig",
    "TrainConfig",
    "TrialSet",
    "UsageError",
    "adapt",
    "c_avg",
    "equal_error_rate",
    "evaluate",
    "exact_ot_oracle",
    "generate_shift_benchmark",
    "load_features",
    "pot_align_loss",
    "pretrain_source",
    "save_features",
    "sinkhorn",
]

from .metrics import MetricsReport, compute_metrics
from .model import (
    MIDG,
    DataError,
    ModelConfig,
    Prediction,
    TrainConfig,
    TrainingError,
    TrainOutputs,
    evaluating,
    total_loss,
)
from .training import ABLATIONS, TrainResult, ablate, evaluate, train

__all__ = [
    "ABLATIONS",
    "DataError",
    "MIDG",
    "MetricsReport",
    "ModelConfig",
    "Prediction",
    "TrainConfig",
    "TrainOutputs",
    "TrainResult",
    "TrainingError",
    "ablate",
    "compute_metrics",
    "evaluate",
    "evaluating",
    "total_loss",
    "train",
]

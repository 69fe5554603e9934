"""Multi-class trajectory forecasting with sparse velocity-label graphs."""

from .data import Scene, convert_sdd, make_windows
from .graph import VlgBatch, build_vlg
from .metrics import MetricReport, evaluate, sample_field
from .model import GaussianField, ModelConfig, init_params, model_forward
from .training import Checkpoint, TrainConfig, Trainer, bivariate_nll, train

__all__ = [
    "Checkpoint", "GaussianField", "MetricReport", "ModelConfig", "Scene", "TrainConfig",
    "Trainer", "VlgBatch", "bivariate_nll", "build_vlg", "convert_sdd", "evaluate",
    "init_params", "make_windows", "model_forward", "sample_field", "train",
]
__version__ = "0.1.0"

"""Clifford-M: a numpy implementation of a sparse rolling geometric-product
backbone for multi-label fundus image classification."""

from .backbone import CliffordM, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .estimator import CliffordMClassifier
from .metrics import MetricsReport, evaluate
from .profiler import Profile, count_flops, count_params
from .training import RunConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "CliffordM", "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint",
    "CliffordMClassifier", "MetricsReport", "evaluate", "Profile", "count_flops", "count_params",
    "RunConfig", "Trainer",
]

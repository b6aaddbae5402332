"""Attract-and-repulse training for image classifiers on very small datasets.

Symmetric cross entropy pulls samples toward their class, a contrastive
regularizer on predicted class probabilities pushes instances apart, and an
EMA teacher supplies consistency targets.
"""

from .augment import AugmentConfig, AugPolicy, TwoViewBatch, make_two_view_batch
from .config import RunConfig, load_config
from .contrastive import PositiveSets, build_positive_sets, contrastive_regularization, info_nce_reference
from .estimator import AttractRepulseClassifier
from .exceptions import (CheckpointError, EmptyPositiveSetWarning, FormatError, InvalidInputError,
                         NonFiniteLossError)
from .losses import (LossConfig, cross_entropy, js_divergence, kl_divergence, label_smoothing,
                     reverse_cross_entropy, softmax, symmetric_cross_entropy)
from .model import ConvClassifier, ModelSpec, aux_fusion, tencrop_predict
from .teacher import MeanTeacher, ema_update, mean_teacher_loss
from .train import LossBreakdown, ScheduleConfig, evaluate, lr_at, total_loss, train_step

__version__ = "0.1.0"

__all__ = [
    "AttractRepulseClassifier", "AugPolicy", "AugmentConfig", "CheckpointError", "ConvClassifier",
    "EmptyPositiveSetWarning", "FormatError", "InvalidInputError", "LossBreakdown", "LossConfig",
    "MeanTeacher", "ModelSpec", "NonFiniteLossError", "PositiveSets", "RunConfig", "ScheduleConfig",
    "TwoViewBatch", "aux_fusion", "build_positive_sets", "contrastive_regularization",
    "cross_entropy", "ema_update", "evaluate", "info_nce_reference", "js_divergence",
    "kl_divergence", "label_smoothing", "load_config", "lr_at", "make_two_view_batch",
    "mean_teacher_loss", "reverse_cross_entropy", "softmax", "symmetric_cross_entropy",
    "tencrop_predict", "total_loss", "train_step",
]

"""Minimal deterministic differentiable runtime (float64, NHWC)."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_loss_csv
from .gradcheck import GradCheckResult, check_gradients, grad_check
from .histogram import HistogramSpec, SetHistogramPool, soft_histogram_pool, soft_histogram_pool_backward
from .layers import (
    Conv3x3,
    Dense,
    Flatten,
    Identity,
    Layer,
    MaxPool2,
    ParamSet,
    ReLU,
    Residual,
    Sequential,
    Tanh,
    Upsample2,
    init_params,
    residual_block,
)
from .losses import sigmoid, sigmoid_cross_entropy, softmax, softmax_cross_entropy
from .optim import PAPER_SCHEDULE, DivergenceError, TrainSchedule, fit, sgd_step, train

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint", "write_loss_csv",
    "GradCheckResult", "check_gradients", "grad_check",
    "HistogramSpec", "SetHistogramPool", "soft_histogram_pool", "soft_histogram_pool_backward",
    "Conv3x3", "Dense", "Flatten", "Identity", "Layer", "MaxPool2", "ParamSet", "ReLU",
    "Residual", "Sequential", "Tanh", "Upsample2", "init_params", "residual_block",
    "sigmoid", "sigmoid_cross_entropy", "softmax", "softmax_cross_entropy",
    "PAPER_SCHEDULE", "DivergenceError", "TrainSchedule", "fit", "sgd_step", "train",
]

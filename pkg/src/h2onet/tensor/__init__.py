"""Minimal reverse-mode autodiff engine, layers and optimizers."""

from . import functional
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .engine import NonFiniteError, Tensor, concat, exp, log, no_grad, sqrt
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dropout,
    InstanceNorm2d,
    Module,
    Parameter,
    SelfAttention,
    frozen_state,
    spectral_normalize,
)
from .optim import Adam, CosineSchedule, OptimizerState, ScheduleState, adam_step, cosine_lr

__all__ = [
    "Adam",
    "BatchNorm2d",
    "CheckpointFormatError",
    "Conv2d",
    "ConvTranspose2d",
    "CosineSchedule",
    "Dropout",
    "InstanceNorm2d",
    "Module",
    "NonFiniteError",
    "OptimizerState",
    "Parameter",
    "ScheduleState",
    "SelfAttention",
    "Tensor",
    "adam_step",
    "concat",
    "cosine_lr",
    "exp",
    "frozen_state",
    "functional",
    "load_checkpoint",
    "log",
    "no_grad",
    "save_checkpoint",
    "spectral_normalize",
    "sqrt",
]

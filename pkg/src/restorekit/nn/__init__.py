"""Differentiable tensor core, model zoo, losses, and optimizers."""

from .autodiff import Tensor
from .layers import Model, ModelConfig, ParamSet, Tape, backward, build_model, forward
from .losses import combined_loss, l1_loss, psnr, ssim
from .optim import AdamState, adam_step, sgd_step

__all__ = [
    "Tensor",
    "Model",
    "ModelConfig",
    "ParamSet",
    "Tape",
    "backward",
    "build_model",
    "forward",
    "combined_loss",
    "l1_loss",
    "psnr",
    "ssim",
    "AdamState",
    "adam_step",
    "sgd_step",
]

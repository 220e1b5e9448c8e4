"""Numpy U-Net: layers, optimizers, training loop and SARW checkpoints."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import PRESETS, AdamConfig, SgdConfig, get_preset, lr_schedule
from .train import TrainingDivergence, predict, train
from .unet import UNetConfig, forward, init_params, loss_and_grads

__all__ = [
    "AdamConfig", "Checkpoint", "PRESETS", "SgdConfig", "TrainingDivergence", "UNetConfig",
    "forward", "get_preset", "init_params", "load_checkpoint", "loss_and_grads", "lr_schedule",
    "predict", "save_checkpoint", "train",
]

"""Reverse-mode autodiff tape, the desk-scale U-Net and its training loop."""

from .tape import Tape, Var
from .training import AugmentationPolicy, TrainConfig, fit, load_params, save_params
from .unet import TinyUNet, UNetConfig

__all__ = ["Tape", "Var", "TinyUNet", "UNetConfig", "TrainConfig", "AugmentationPolicy", "fit", "save_params", "load_params"]

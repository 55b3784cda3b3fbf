"""Score models: analytic Gaussian-field oracle and the U-net with mean bypass."""

from .base import ScoreModel
from .checkpoint import load_checkpoint, load_score, save_checkpoint
from .gaussian import GaussianFieldScore, power_law_spectrum, wavenumber_modulus
from .unet import MeanBypass, UNet, UNetConfig, UNetScore, unet_gradient

__all__ = [
    "GaussianFieldScore",
    "MeanBypass",
    "ScoreModel",
    "UNet",
    "UNetConfig",
    "UNetScore",
    "load_checkpoint",
    "load_score",
    "power_law_spectrum",
    "save_checkpoint",
    "unet_gradient",
    "wavenumber_modulus",
]

"""Continuously indexed flows (CIFs), residual/coupling/autoregressive baselines and diagnostics."""
from .numcore import DTYPE, SeededRng
from .bijections import ActNorm, AffineCoupling, Compose, Identity, MaskedAutoregressive, ResidualBlock
from .cif import CifLayer, CifStack, Flow, log_likelihood_is
from .config import TrainConfig, config_from_dict, load_config
from .models import build_model
from .training import evaluate, train

__all__ = [
    "DTYPE", "SeededRng",
    "ActNorm", "AffineCoupling", "Compose", "Identity", "MaskedAutoregressive", "ResidualBlock",
    "CifLayer", "CifStack", "Flow", "log_likelihood_is",
    "TrainConfig", "config_from_dict", "load_config",
    "build_model", "evaluate", "train",
]
__version__ = "0.1.0"

"""Normalization layers, a statistical model of batch-norm noise, and variational scales."""

from .config import ExperimentConfig, load_config
from .model import LayerSpec, Network, build_network
from .noise import NoiseConfig, NoiseMode, sample_bn_noise
from .normalization import NormKind
from .tensor import Tensor, no_grad
from .variational import PriorConfig, VariationalScale

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "LayerSpec",
    "Network",
    "NoiseConfig",
    "NoiseMode",
    "NormKind",
    "PriorConfig",
    "Tensor",
    "VariationalScale",
    "build_network",
    "load_config",
    "no_grad",
    "sample_bn_noise",
]

"""Skip-attention point-cloud completion at desk scale."""

__version__ = "0.1.0"

from . import autodiff, attention, data_io, decoder, encoder, geometry, losses
from .model import ModelConfig, Network, init_model_params

__all__ = [
    "autodiff", "attention", "data_io", "decoder", "encoder", "geometry",
    "losses", "ModelConfig", "Network", "init_model_params",
]

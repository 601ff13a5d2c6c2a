"""Masked video-inpainting transformer in pure numpy, sized for a desktop CPU."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, load_config
from .dmt import DmtConfig, dmt_layer, dmt_stack
from .pipeline import forward, init_model_params, load_checkpoint, save_checkpoint

__all__ = [
    "DmtConfig",
    "ModelConfig",
    "TrainConfig",
    "dmt_layer",
    "dmt_stack",
    "forward",
    "init_model_params",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
]

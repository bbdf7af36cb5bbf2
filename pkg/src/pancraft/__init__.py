"""Desk-scale pan-sharpening: model, data pipeline, training and metrics."""

from .layers import AttnConfig, Mode, local_attn
from .model import Level, ModelConfig, ModelInputs, PanSharpener, desk_config, paper_config
from .tensor import Param, Tape, Tensor, backward, set_default_dtype, use_dtype

__version__ = "0.1.0"

__all__ = [
    "AttnConfig", "Mode", "local_attn",
    "Level", "ModelConfig", "ModelInputs", "PanSharpener", "desk_config", "paper_config",
    "Param", "Tape", "Tensor", "backward", "set_default_dtype", "use_dtype",
    "__version__",
]

from .layers import (
    Conv2d,
    CumulativeLayerNorm,
    ElmanBottleneck,
    GatedConv2d,
    GatedConvSpec,
    PReLU,
    Sequential,
    gated_block,
    sigmoid,
)
from .model import Model
from .optim import AdamState, PlateauHalving, adam_step
from .params import ModelParams, load_checkpoint, save_checkpoint

__all__ = [
    "AdamState",
    "Conv2d",
    "CumulativeLayerNorm",
    "ElmanBottleneck",
    "GatedConv2d",
    "GatedConvSpec",
    "Model",
    "ModelParams",
    "PReLU",
    "PlateauHalving",
    "Sequential",
    "adam_step",
    "gated_block",
    "load_checkpoint",
    "save_checkpoint",
    "sigmoid",
]

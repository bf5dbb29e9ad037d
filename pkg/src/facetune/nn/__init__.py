"""Neural layers on spiral neighbourhoods."""

from .layers import (
    EPS,
    MLP,
    BlockConfig,
    Linear,
    Module,
    SpiralBlock,
    SpiralConv,
    SpiralResBlock,
    adain,
    instance_norm,
    spiral_conv,
)

__all__ = ["EPS", "MLP", "BlockConfig", "Linear", "Module", "SpiralBlock", "SpiralConv",
           "SpiralResBlock", "adain", "instance_norm", "spiral_conv"]

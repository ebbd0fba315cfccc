"""Gated dual-branch up/downsampling and parallel-dilation CSP fusion for
three-level feature pyramids, on a small numpy tensor/autodiff core."""

__version__ = "0.1.0"

from .core.ops import ConvSpec
from .core.tensor import Tape, Tensor
from .neck import CSPPAC, PAC, AttentionDownsample, AttentionUpsample, ChannelGate
from .pyramid import Model, NeckConfig, NeckGraph, StubBackbone

__all__ = [
    "AttentionDownsample", "AttentionUpsample", "CSPPAC", "ChannelGate", "ConvSpec", "Model",
    "NeckConfig", "NeckGraph", "PAC", "StubBackbone", "Tape", "Tensor",
]

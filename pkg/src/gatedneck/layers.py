"""Parameter-holding layers.

Modules describe structure only. Parameters live in a flat, ordered mapping
from dotted names (``neck.up0.gate.conv.weight``) to tensors, so the same
module can be applied to perturbed parameters, checkpoints map one-to-one
onto that mapping, and modules stay immutable after construction.
"""

from __future__ import annotations

import math
from typing import Iterator, Mapping

import numpy as np

from .core import ops
from .core.ops import ConvSpec
from .core.tensor import Tensor

Params = Mapping[str, Tensor]


class Module:
    kind = "Module"

    def __init__(self, name: str):
        self.name = name

    def _own_params(self) -> dict:
        """Own parameter shapes keyed by local name, with their fan-in."""
        return {}

    def children(self) -> list:
        return []

    def param_shapes(self) -> dict:
        shapes = {f"{self.name}.{k}": shape for k, (shape, _) in self._own_params().items()}
        for child in self.children():
            shapes.update(child.param_shapes())
        return shapes

    def _fan_ins(self) -> Iterator[tuple]:
        for k, (shape, fan_in) in self._own_params().items():
            yield f"{self.name}.{k}", shape, fan_in
        for child in self.children():
            yield from child._fan_ins()

    def init_params(self, seed: int = 0, dtype=np.float32) -> dict:
        return init_params([self], seed, dtype)

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def count(self, shape: tuple) -> tuple:
        """Return (output shape, FLOPs) for an input of ``shape``."""
        raise NotImplementedError

    def __call__(self, params: Params, x: Tensor) -> Tensor:
        raise NotImplementedError


def init_params(modules, seed: int = 0, dtype=np.float32) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.

    Draws come from one Philox stream keyed by ``seed``, in declaration order,
    and are generated in float64 before casting so both precisions share values.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    params = {}
    for m in modules:
        for name, shape, fan_in in m._fan_ins():
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype)
    return params


def conv_flops(spec: ConvSpec, shape: tuple) -> tuple:
    n, c, h, w = shape
    if c != spec.in_channels:
        raise ValueError(f"expected {spec.in_channels} input channels, got {c}")
    ho, wo = spec.out_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output size for input {shape}")
    out = (n, spec.out_channels, ho, wo)
    flops = 2 * n * spec.out_channels * spec.in_channels * spec.kernel ** 2 * ho * wo
    if spec.activation != "identity":
        flops += math.prod(out)
    return out, flops


class Conv(Module):
    kind = "Conv"

    def __init__(self, name: str, spec: ConvSpec):
        super().__init__(name)
        self.spec = spec

    def _own_params(self):
        fan_in = self.spec.in_channels * self.spec.kernel ** 2
        own = {"weight": (self.spec.weight_shape, fan_in)}
        if self.spec.bias:
            own["bias"] = ((self.spec.out_channels,), fan_in)
        return own

    def __call__(self, params, x):
        bias = params[f"{self.name}.bias"] if self.spec.bias else None
        return ops.conv2d(x, self.spec, params[f"{self.name}.weight"], bias)

    def count(self, shape):
        return conv_flops(self.spec, shape)


class ConvTranspose(Module):
    """Transposed conv with kernel == stride, so outputs tile without overlap."""

    kind = "ConvTranspose"

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int = 2, stride: int = 2, activation: str = "silu"):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.activation = kernel, stride, activation

    def _own_params(self):
        fan_in = self.out_channels * self.kernel ** 2
        return {
            "weight": ((self.in_channels, self.out_channels, self.kernel, self.kernel), fan_in),
            "bias": ((self.out_channels,), fan_in),
        }

    def __call__(self, params, x):
        return ops.conv_transpose2d(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"],
                                    stride=self.stride, kernel=self.kernel,
                                    activation=self.activation)

    def count(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        out = (n, self.out_channels, (h - 1) * self.stride + self.kernel,
               (w - 1) * self.stride + self.kernel)
        flops = 2 * n * c * self.out_channels * self.kernel ** 2 * h * w
        if self.activation != "identity":
            flops += math.prod(out)
        return out, flops

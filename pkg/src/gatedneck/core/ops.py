"""Differentiable ops. Each records a backward closure on the active tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, active_tape

ACTIVATIONS = ("identity", "sigmoid", "silu")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True
    activation: str = "silu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channels must be positive: {self}")
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"need kernel, stride, dilation >= 1 and padding >= 0: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_size(self, h: int, w: int) -> tuple:
        k = self.kernel
        return (
            kernels.conv_out_size(h, k, self.stride, self.padding, self.dilation),
            kernels.conv_out_size(w, k, self.stride, self.padding, self.dilation),
        )


def _record(op, inputs, out, backward):
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _check_nchw(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected NCHW tensor, got dims {x.shape}")


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation, plus bias, then ``spec.activation``."""
    _check_nchw(x, "conv2d")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight dims {weight.shape} != {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    s, p, d = spec.stride, spec.padding, spec.dilation
    xd, wd = x.data, weight.data
    y = kernels.conv2d(xd, wd, s, p, d)
    inputs = [x, weight]
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def backward(g):
        grads = [
            kernels.conv2d_grad_input(g, wd, xd.shape, s, p, d),
            kernels.conv2d_grad_weight(g, xd, wd.shape, s, p, d),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out = _record("conv2d", inputs, Tensor._wrap(y), backward)
    return activate(out, spec.activation)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2, kernel: int = 2, activation: str = "identity") -> Tensor:
    _check_nchw(x, "conv_transpose2d")
    if weight.shape[0] != x.shape[1]:
        raise ValueError(
            f"conv_transpose2d: input has {x.shape[1]} channels, weights expect {weight.shape[0]}")
    if weight.shape[2:] != (kernel, kernel):
        raise ValueError(f"conv_transpose2d: weight dims {weight.shape} do not match kernel {kernel}")
    xd, wd = x.data, weight.data
    y = kernels.conv_transpose2d(xd, wd, stride)
    inputs = [x, weight]
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def backward(g):
        grads = [
            kernels.conv_transpose2d_grad_input(g, wd, stride),
            kernels.conv_transpose2d_grad_weight(g, xd, wd.shape, stride),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    out = _record("conv_transpose2d", inputs, Tensor._wrap(y), backward)
    return activate(out, activation)


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    _check_nchw(x, "maxpool2d")
    y, idx = kernels.maxpool2d(x.data, kernel)
    shape = x.shape
    return _record("maxpool2d", [x], Tensor._wrap(y),
                   lambda g: [kernels.maxpool2d_grad(g, idx, shape, kernel)])


def global_avgpool(x: Tensor) -> Tensor:
    _check_nchw(x, "global_avgpool")
    shape = x.shape
    return _record("global_avgpool", [x], Tensor._wrap(kernels.global_avgpool(x.data)),
                   lambda g: [kernels.global_avgpool_grad(g, shape)])


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    _check_nchw(x, "upsample_nearest")
    return _record("upsample_nearest", [x], Tensor._wrap(kernels.upsample_nearest(x.data, scale)),
                   lambda g: [kernels.upsample_nearest_grad(g, scale)])


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: nothing to concatenate")
    for p in parts:
        _check_nchw(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: spatial mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    y = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return [g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    return _record("concat_channels", list(parts), Tensor._wrap(y), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = kernels.sigmoid(x.data)
    return _record("sigmoid", [x], Tensor._wrap(s), lambda g: [g * s * (1 - s)])


def silu(x: Tensor) -> Tensor:
    xd = x.data
    return _record("silu", [x], Tensor._wrap(kernels.silu(xd)),
                   lambda g: [kernels.silu_grad(g, xd)])


def activate(x: Tensor, name: str) -> Tensor:
    if name == "identity":
        return x
    if name == "sigmoid":
        return sigmoid(x)
    if name == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {name!r}")


def mul_broadcast(x: Tensor, gate: Tensor) -> Tensor:
    """Scale every spatial location of channel k by ``gate[:, k]``."""
    _check_nchw(x, "mul_broadcast")
    n, c = x.shape[:2]
    if gate.shape != (n, c, 1, 1):
        raise ValueError(f"mul_broadcast: gate dims {gate.shape} != {(n, c, 1, 1)}")
    xd, gd = x.data, gate.data
    return _record("mul_broadcast", [x, gate], Tensor._wrap(xd * gd),
                   lambda g: [g * gd, (g * xd).sum(axis=(2, 3), keepdims=True)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: dims differ {a.shape} vs {b.shape}")
    return _record("add", [a, b], Tensor._wrap(a.data + b.data), lambda g: [g, g])


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    return _record("sum", [x], Tensor._wrap(np.asarray(x.data.sum(), dtype=dtype)),
                   lambda g: [np.full(shape, g, dtype=dtype)])


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <x, weights>; used to project an output onto a fixed direction."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ValueError(f"weighted_sum: weights {weights.shape} != input {x.shape}")
    return _record("weighted_sum", [x], Tensor._wrap(np.asarray(np.vdot(x.data, weights))),
                   lambda g: [g * weights])

"""Gated dual-branch resamplers and the parallel-dilation CSP fusion block."""

from __future__ import annotations

import math

from .core import ops
from .core.ops import ConvSpec
from .core.tensor import Tensor
from .layers import Conv, ConvTranspose, Module


def _require(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


class ChannelGate(Module):
    """Per-channel weights sigmoid(conv1x1(global_avgpool(x))), shape (n, C, 1, 1)."""

    kind = "ChannelGate"

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.channels = channels
        self.conv = Conv(f"{name}.conv", ConvSpec(channels, channels, 1, activation="identity"))

    def children(self):
        return [self.conv]

    def __call__(self, params, x):
        _require(x.shape[1] == self.channels,
                 f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        return ops.sigmoid(self.conv(params, ops.global_avgpool(x)))

    def count(self, shape):
        n, c, h, w = shape
        flops = n * c * h * w  # avgpool window adds
        out, f = self.conv.count((n, c, 1, 1))
        return out, flops + f + math.prod(out)


class AttentionUpsample(Module):
    """Doubles spatial size with two gated branches.

    Branch one is a stride-2 transposed conv, branch two nearest-upsample
    followed by a conv; each yields C/2 channels. Their concat is scaled by a
    channel gate computed from the block input and fused back to C channels.
    """

    kind = "AttentionUpsample"

    def __init__(self, name: str, channels: int, up_kernel: int = 1, fuse_kernel: int = 1):
        super().__init__(name)
        _require(channels % 2 == 0, f"{name}: channel count must be even, got {channels}")
        half = channels // 2
        self.channels = channels
        self.gate = ChannelGate(f"{name}.gate", channels)
        self.deconv = ConvTranspose(f"{name}.deconv", channels, half, kernel=2, stride=2)
        self.up_conv = Conv(f"{name}.up_conv",
                            ConvSpec(channels, half, up_kernel, padding=up_kernel // 2))
        self.fuse = Conv(f"{name}.fuse",
                         ConvSpec(channels, channels, fuse_kernel, padding=fuse_kernel // 2))

    def children(self):
        return [self.gate, self.deconv, self.up_conv, self.fuse]

    def gated(self, params, x: Tensor) -> Tensor:
        """The gated concat before the fuse conv."""
        _require(x.shape[1] == self.channels,
                 f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        g = self.gate(params, x)
        u1 = self.deconv(params, x)
        u2 = self.up_conv(params, ops.upsample_nearest(x, 2))
        return ops.mul_broadcast(ops.concat_channels([u1, u2]), g)

    def __call__(self, params, x):
        return self.fuse(params, self.gated(params, x))

    def count(self, shape):
        n, c, h, w = shape
        _, fg = self.gate.count(shape)
        s1, f1 = self.deconv.count(shape)
        s2, f2 = self.up_conv.count((n, c, 2 * h, 2 * w))
        cat = (n, s1[1] + s2[1], 2 * h, 2 * w)
        out, ff = self.fuse.count(cat)
        return out, fg + f1 + f2 + math.prod(cat) + ff


class AttentionDownsample(Module):
    """Halves spatial size: stride-2 3x3 conv alongside maxpool + 1x1 conv, gated, fused."""

    kind = "AttentionDownsample"

    def __init__(self, name: str, channels: int, fuse_kernel: int = 3):
        super().__init__(name)
        _require(channels % 2 == 0, f"{name}: channel count must be even, got {channels}")
        half = channels // 2
        self.channels = channels
        self.gate = ChannelGate(f"{name}.gate", channels)
        self.stride_conv = Conv(f"{name}.stride_conv", ConvSpec(channels, half, 3, stride=2, padding=1))
        self.pool_conv = Conv(f"{name}.pool_conv", ConvSpec(channels, half, 1))
        self.fuse = Conv(f"{name}.fuse",
                         ConvSpec(channels, channels, fuse_kernel, padding=fuse_kernel // 2))

    def children(self):
        return [self.gate, self.stride_conv, self.pool_conv, self.fuse]

    def _check(self, shape):
        _require(shape[1] == self.channels,
                 f"{self.name}: expected {self.channels} channels, got {shape[1]}")
        _require(shape[2] % 2 == 0 and shape[3] % 2 == 0,
                 f"{self.name}: spatial size {shape[2]}x{shape[3]} must be even")

    def gated(self, params, x: Tensor) -> Tensor:
        self._check(x.shape)
        g = self.gate(params, x)
        d1 = self.stride_conv(params, x)
        d2 = self.pool_conv(params, ops.maxpool2d(x, 2))
        return ops.mul_broadcast(ops.concat_channels([d1, d2]), g)

    def __call__(self, params, x):
        return self.fuse(params, self.gated(params, x))

    def count(self, shape):
        self._check(shape)
        n, c, h, w = shape
        _, fg = self.gate.count(shape)
        s1, f1 = self.stride_conv.count(shape)
        pooled = (n, c, h // 2, w // 2)
        s2, f2 = self.pool_conv.count(pooled)
        cat = (n, s1[1] + s2[1], h // 2, w // 2)
        out, ff = self.fuse.count(cat)
        return out, fg + f1 + 4 * math.prod(pooled) + f2 + math.prod(cat) + ff


class PAC(Module):
    """Three 3x3 convs with dilation 1, 2, 3 in parallel, merged by a 1x1 conv."""

    kind = "PAC"
    dilations = (1, 2, 3)

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.channels = channels
        self.branches = [
            Conv(f"{name}.branch{d}", ConvSpec(channels, channels, 3, padding=d, dilation=d))
            for d in self.dilations
        ]
        self.merge = Conv(f"{name}.merge", ConvSpec(3 * channels, channels, 1))

    def children(self):
        return [*self.branches, self.merge]

    def branch_outputs(self, params, x: Tensor) -> list:
        _require(x.shape[1] == self.channels,
                 f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        return [b(params, x) for b in self.branches]

    def __call__(self, params, x):
        return self.merge(params, ops.concat_channels(self.branch_outputs(params, x)))

    def count(self, shape):
        flops = 0
        for b in self.branches:
            s, f = b.count(shape)
            flops += f
        out, f = self.merge.count((s[0], 3 * s[1], s[2], s[3]))
        return out, flops + f


class CSPPAC(Module):
    """Cross-stage-partial block whose main branch runs PAC.

    main: 1x1 (C -> mid) then PAC(mid); shortcut: 1x1 (C -> mid); the concat
    of both goes through a 1x1 to ``out_channels``. ``mid_channels`` defaults
    to C/2, ``out_channels`` to C.
    """

    kind = "CSP-PAC"

    def __init__(self, name: str, in_channels: int, out_channels: int = None,
                 mid_channels: int = None):
        super().__init__(name)
        if mid_channels is None:
            _require(in_channels % 2 == 0, f"{name}: channel count must be even, got {in_channels}")
            mid_channels = in_channels // 2
        out_channels = out_channels or in_channels
        self.in_channels, self.out_channels, self.mid_channels = in_channels, out_channels, mid_channels
        self.main_in = Conv(f"{name}.main_in", ConvSpec(in_channels, mid_channels, 1))
        self.pac = PAC(f"{name}.pac", mid_channels)
        self.shortcut = Conv(f"{name}.shortcut", ConvSpec(in_channels, mid_channels, 1))
        self.out = Conv(f"{name}.out", ConvSpec(2 * mid_channels, out_channels, 1))

    def children(self):
        return [self.main_in, self.pac, self.shortcut, self.out]

    def __call__(self, params, x):
        _require(x.shape[1] == self.in_channels,
                 f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        main = self.pac(params, self.main_in(params, x))
        short = self.shortcut(params, x)
        return self.out(params, ops.concat_channels([main, short]))

    def count(self, shape):
        s, f1 = self.main_in.count(shape)
        _, f2 = self.pac.count(s)
        _, f3 = self.shortcut.count(shape)
        out, f4 = self.out.count((s[0], 2 * s[1], s[2], s[3]))
        return out, f1 + f2 + f3 + f4

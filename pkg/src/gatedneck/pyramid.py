"""Three-level neck assembly over P3/P4/P5 with per-module ablation toggles.

Top-down: up(P5) ++ P4 -> fuse -> F4; up(F4) ++ P3 -> fuse -> N3.
Bottom-up: down(N3) ++ F4 -> fuse -> N4; down(N4) ++ P5 -> fuse -> N5.
``++`` is channel concat (2*hidden), every fuse maps back to hidden.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import ops
from .core.ops import ConvSpec
from .core.tensor import Tensor
from .layers import Conv, Module, init_params
from .neck import CSPPAC, AttentionDownsample, AttentionUpsample

LEVEL_STRIDES = (8, 16, 32)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NeckConfig:
    hidden_dim: int = 256
    input_size: tuple = (640, 640)
    use_au: bool = True
    use_ad: bool = True
    use_csp_pac: bool = True
    seed: int = 0
    in_channels: tuple = (64, 128, 256)

    def __post_init__(self):
        if isinstance(self.input_size, int):
            object.__setattr__(self, "input_size", (self.input_size, self.input_size))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "in_channels", tuple(self.in_channels))
        self.validate()

    def validate(self):
        if not _is_int(self.hidden_dim) or self.hidden_dim < 2 or self.hidden_dim % 2:
            raise ConfigError(f"hidden_dim must be an even integer >= 2, got {self.hidden_dim!r}")
        if len(self.input_size) != 2 or not all(_is_int(s) and s > 0 for s in self.input_size):
            raise ConfigError(f"input_size must be a positive int or [height, width], got {self.input_size!r}")
        if any(s % 32 for s in self.input_size):
            raise ConfigError(
                f"input_size {list(self.input_size)} must be divisible by 32 so P3/P4/P5 halve exactly")
        for flag in ("use_au", "use_ad", "use_csp_pac"):
            if not isinstance(getattr(self, flag), bool):
                raise ConfigError(f"{flag} must be true or false, got {getattr(self, flag)!r}")
        if not _is_int(self.seed) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if len(self.in_channels) != 3 or not all(_is_int(c) and c > 0 for c in self.in_channels):
            raise ConfigError(f"in_channels must list three positive ints for P3/P4/P5, got {self.in_channels!r}")

    @property
    def level_sizes(self) -> list:
        h, w = self.input_size
        return [(h // s, w // s) for s in LEVEL_STRIDES]

    def replace(self, **changes) -> "NeckConfig":
        d = self.to_dict()
        d.update(changes)
        return NeckConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["in_channels"] = list(self.in_channels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NeckConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"unknown config field(s) {unknown}; allowed: {sorted(allowed)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "NeckConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        return cls.from_dict(data)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class NearestUpsample(Module):
    kind = "NearestUpsample"

    def __call__(self, params, x):
        return ops.upsample_nearest(x, 2)

    def count(self, shape):
        n, c, h, w = shape
        return (n, c, 2 * h, 2 * w), 0


class StridedConvDownsample(Module):
    kind = "StridedConvDownsample"

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.conv = Conv(f"{name}.conv", ConvSpec(channels, channels, 3, stride=2, padding=1))

    def children(self):
        return [self.conv]

    def __call__(self, params, x):
        return self.conv(params, x)

    def count(self, shape):
        return self.conv.count(shape)


class PlainCSP(Module):
    """CSP block whose main branch is a stack of 3x3 convs instead of PAC."""

    kind = "CSP"

    def __init__(self, name: str, in_channels: int, out_channels: int, mid_channels: int,
                 depth: int = 3):
        super().__init__(name)
        self.main_in = Conv(f"{name}.main_in", ConvSpec(in_channels, mid_channels, 1))
        self.inner = [Conv(f"{name}.inner{i}", ConvSpec(mid_channels, mid_channels, 3, padding=1))
                      for i in range(depth)]
        self.shortcut = Conv(f"{name}.shortcut", ConvSpec(in_channels, mid_channels, 1))
        self.out = Conv(f"{name}.out", ConvSpec(2 * mid_channels, out_channels, 1))

    def children(self):
        return [self.main_in, *self.inner, self.shortcut, self.out]

    def __call__(self, params, x):
        main = self.main_in(params, x)
        for conv in self.inner:
            main = conv(params, main)
        return self.out(params, ops.concat_channels([main, self.shortcut(params, x)]))

    def count(self, shape):
        s, flops = self.main_in.count(shape)
        for conv in self.inner:
            s, f = conv.count(s)
            flops += f
        _, f = self.shortcut.count(shape)
        out, f2 = self.out.count((s[0], 2 * s[1], s[2], s[3]))
        return out, flops + f + f2


class StubBackbone(Module):
    """Fixed strided convs standing in for a real backbone: strides 8, 16, 32."""

    kind = "StubBackbone"

    def __init__(self, name: str, out_channels=(64, 128, 256)):
        super().__init__(name)
        c3, c4, c5 = out_channels
        self.stem = Conv(f"{name}.stem", ConvSpec(3, c3, 8, stride=8))
        self.down4 = Conv(f"{name}.down4", ConvSpec(c3, c4, 3, stride=2, padding=1))
        self.down5 = Conv(f"{name}.down5", ConvSpec(c4, c5, 3, stride=2, padding=1))

    def children(self):
        return [self.stem, self.down4, self.down5]

    def __call__(self, params, image):
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"backbone expects an (n, 3, H, W) image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be divisible by 32")
        p3 = self.stem(params, image)
        p4 = self.down4(params, p3)
        return p3, p4, self.down5(params, p4)


class NeckGraph(Module):
    """Projections plus the eight resampling/fusion slots of the neck.

    Slot names are the same for every toggle combination so reports and
    deltas line up row by row; only the block kind behind a slot changes.
    """

    kind = "Neck"

    def __init__(self, cfg: NeckConfig, name: str = "neck"):
        super().__init__(name)
        self.cfg = cfg
        h = cfg.hidden_dim
        self.proj = [
            Conv(f"{name}.proj{lvl}", ConvSpec(c, h, 1, activation="identity"))
            for lvl, c in zip((3, 4, 5), cfg.in_channels)
        ]

        def up(slot):
            return AttentionUpsample(f"{name}.{slot}", h) if cfg.use_au else NearestUpsample(f"{name}.{slot}")

        def down(slot):
            return AttentionDownsample(f"{name}.{slot}", h) if cfg.use_ad else StridedConvDownsample(f"{name}.{slot}", h)

        def fuse(slot):
            if cfg.use_csp_pac:
                return CSPPAC(f"{name}.{slot}", 2 * h, h, mid_channels=h // 2)
            return PlainCSP(f"{name}.{slot}", 2 * h, h, mid_channels=h // 2)

        self.up0, self.up1 = up("up0"), up("up1")
        self.fuse_td0, self.fuse_td1 = fuse("fuse_td0"), fuse("fuse_td1")
        self.down0, self.down1 = down("down0"), down("down1")
        self.fuse_bu0, self.fuse_bu1 = fuse("fuse_bu0"), fuse("fuse_bu1")

    def blocks(self) -> list:
        return [*self.proj, self.up0, self.fuse_td0, self.up1, self.fuse_td1,
                self.down0, self.fuse_bu0, self.down1, self.fuse_bu1]

    def children(self):
        return self.blocks()

    def slot(self, block: Module) -> str:
        return block.name[len(self.name) + 1:]

    def project_inputs(self, params, p3: Tensor, p4: Tensor, p5: Tensor) -> tuple:
        sizes = [t.shape[2:] for t in (p3, p4, p5)]
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if (h0, w0) != (2 * h1, 2 * w1):
                raise ValueError(f"level sizes must halve exactly from P3 to P5, got {sizes}")
        return tuple(conv(params, t) for conv, t in zip(self.proj, (p3, p4, p5)))

    def forward_neck(self, params, p3: Tensor, p4: Tensor, p5: Tensor) -> tuple:
        """Run the top-down and bottom-up paths on already-projected levels."""

        def run(block, *args):
            try:
                return block(params, *args)
            except ValueError as e:
                raise ValueError(f"{self.slot(block)}: {e}") from e

        def fuse(block, resampled, lateral):
            # a concat mismatch is reported against the fusion slot consuming it
            try:
                joined = ops.concat_channels([resampled, lateral])
            except ValueError as e:
                raise ValueError(f"{self.slot(block)}: {e}") from e
            return run(block, joined)

        f4 = fuse(self.fuse_td0, run(self.up0, p5), p4)
        n3 = fuse(self.fuse_td1, run(self.up1, f4), p3)
        n4 = fuse(self.fuse_bu0, run(self.down0, n3), f4)
        n5 = fuse(self.fuse_bu1, run(self.down1, n4), p5)
        return n3, n4, n5

    def __call__(self, params, p3, p4, p5):
        return self.forward_neck(params, *self.project_inputs(params, p3, p4, p5))

    def input_shapes(self, batch: int = 1) -> list:
        return [(batch, c, h, w) for c, (h, w) in zip(self.cfg.in_channels, self.cfg.level_sizes)]

    def count_rows(self, batch: int = 1) -> list:
        """(slot, kind, params, flops) per block at the configured input size."""
        rows = []
        projected = []
        for conv, shape in zip(self.proj, self.input_shapes(batch)):
            s, f = conv.count(shape)
            projected.append(s)
            rows.append((self.slot(conv), conv.kind, conv.num_params(), f))
        p3, p4, p5 = projected

        def step(block, shape):
            s, f = block.count(shape)
            rows.append((self.slot(block), block.kind, block.num_params(), f))
            return s

        def cat(a, b):
            if (a[0], a[2], a[3]) != (b[0], b[2], b[3]):
                raise ValueError(f"concat spatial mismatch {a} vs {b}")
            return (a[0], a[1] + b[1], a[2], a[3])

        f4 = step(self.fuse_td0, cat(step(self.up0, p5), p4))
        n3 = step(self.fuse_td1, cat(step(self.up1, f4), p3))
        n4 = step(self.fuse_bu0, cat(step(self.down0, n3), f4))
        step(self.fuse_bu1, cat(step(self.down1, n4), p5))
        return rows


@dataclass
class Model:
    """Stub backbone + neck with one parameter mapping covering both."""

    cfg: NeckConfig
    backbone: StubBackbone = field(init=False)
    neck: NeckGraph = field(init=False)

    def __post_init__(self):
        self.backbone = StubBackbone("backbone", self.cfg.in_channels)
        self.neck = NeckGraph(self.cfg)

    def param_shapes(self) -> dict:
        return {**self.backbone.param_shapes(), **self.neck.param_shapes()}

    def init_params(self, dtype=np.float32) -> dict:
        return init_params([self.backbone, self.neck], self.cfg.seed, dtype)

    def __call__(self, params, image: Tensor) -> tuple:
        return self.neck(params, *self.backbone(params, image))

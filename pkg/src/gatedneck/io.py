"""Binary tensor/checkpoint formats, PNM image loading and atomic writes.

AFT1 tensor record::

    b"AFT1" | u8 kind (0=f32, 1=f64) | u8 rank | rank x u64 dims | LE scalars

AFCK checkpoint::

    b"AFCK" | u32 count | count x (u16 name length | UTF-8 name | AFT1 record)

All integers are little-endian; scalars are row-major (n, c, h, w).
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .core.tensor import Tensor

TENSOR_MAGIC = b"AFT1"
CHECKPOINT_MAGIC = b"AFCK"
_KINDS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(b)}")
    return b


def encode_tensor(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    kind = _KIND_OF.get(arr.dtype)
    if kind is None:
        raise FormatError(f"unsupported scalar kind {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = TENSOR_MAGIC + struct.pack("<BB", kind, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_KINDS[kind]).tobytes()


def read_tensor_from(f: BinaryIO) -> Tensor:
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    kind, rank = struct.unpack("<BB", _read_exact(f, 2, "tensor header"))
    if kind not in _KINDS:
        raise FormatError(f"unknown scalar kind {kind}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "tensor dims"))
    dtype = _KINDS[kind]
    count = math.prod(dims)
    payload = _read_exact(f, count * dtype.itemsize, "tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return Tensor(arr, dtype=dtype.newbyteorder("="))


def decode_tensor(data: bytes) -> Tensor:
    f = io.BytesIO(data)
    t = read_tensor_from(f)
    if f.read(1):
        raise FormatError("trailing bytes after tensor record")
    return t


def save_tensor(path, t) -> None:
    atomic_write(path, encode_tensor(t))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(params: Mapping[str, Tensor]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        out += [struct.pack("<H", len(raw)), raw, encode_tensor(t)]
    return b"".join(out)


def decode_checkpoint(data: bytes) -> dict:
    f = io.BytesIO(data)
    magic = _read_exact(f, 4, "checkpoint magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(f, 4, "checkpoint count"))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, n, "name").decode("utf-8")
        if name in params:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        params[name] = read_tensor_from(f)
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return params


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


def check_checkpoint(params: Mapping[str, Tensor], expected: Mapping[str, tuple]) -> None:
    """Raise FormatError unless names and dims match ``expected`` exactly."""
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise FormatError(f"checkpoint does not match config: missing {missing[:5]}, "
                          f"unexpected {extra[:5]}")
    for k, shape in expected.items():
        if params[k].shape != tuple(shape):
            raise FormatError(f"checkpoint entry {k} has dims {params[k].shape}, config needs {tuple(shape)}")


def _pnm_tokens(data: bytes, count: int):
    """Return ``count`` header tokens and the offset of the raster."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, i + 1


def load_image_pnm(path) -> Tensor:
    """Binary PGM (P5) or PPM (P6) with maxval 255 as a (1, 3, H, W) tensor in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image format {magic!r}; need binary PGM (P5) or PPM (P6)")
    tokens, offset = _pnm_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"{path}: malformed PNM header") from e
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, only 255")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: empty image {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated raster, wanted {need} bytes, got {len(raster)}")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels).transpose(2, 0, 1)
    if channels == 1:
        px = np.repeat(px, 3, axis=0)
    return Tensor(px[None].astype(np.float32) / 255.0)

"""Immutable dense tensors and the tape that records differentiable ops."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

SCALAR_KINDS = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """A read-only numpy array with a stable integer id.

    Values are never mutated after construction, so a tensor can be shared
    across forward passes and tapes freely. NCHW ops check rank themselves;
    rank-0 values appear as scalar losses.
    """

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in SCALAR_KINDS:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dims must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Kernel outputs are fresh arrays; skip the defensive copy.
        t = cls.__new__(cls)
        arr = np.asarray(arr)  # 0-d arithmetic yields numpy scalars
        arr.flags.writeable = False
        t.data = arr
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    output: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records ops executed inside ``with Tape() as tape:`` for reverse mode.

    A tape belongs to one thread and one backward pass; concurrent forwards
    each need their own tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.shapes: dict[int, tuple] = {}
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def watch(self, t: Tensor) -> Tensor:
        self.shapes.setdefault(t.id, t.shape)
        return t

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        for t in inputs:
            self.shapes.setdefault(t.id, t.shape)
        self.shapes[output.id] = output.shape
        self.nodes.append(Node(op, tuple(t.id for t in inputs), output.id, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Backpropagate from ``target`` and return d(target)/d(source) per source.

        ``target`` must be scalar unless ``seed`` (an upstream gradient with
        target's dims) is given. Sources the target does not depend on get
        zero gradients. All reachable values end up in ``self.grads``.
        """
        if target.id not in self.shapes:
            raise KeyError("target was not produced on this tape")
        if seed is None:
            if target.data.size != 1:
                raise ValueError(f"non-scalar target {target.shape} needs a seed gradient")
            seed = np.ones(target.shape, dtype=target.dtype)
        else:
            seed = np.asarray(seed, dtype=target.dtype)
            if seed.shape != target.shape:
                raise ValueError(f"seed dims {seed.shape} != target dims {target.shape}")

        grads = {target.id: seed}
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            for uid, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if uid in grads:
                    grads[uid] = grads[uid] + gi
                else:
                    grads[uid] = gi
        self.grads = grads
        return [
            grads[s.id] if s.id in grads else np.zeros(s.shape, dtype=s.dtype)
            for s in sources
        ]


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None

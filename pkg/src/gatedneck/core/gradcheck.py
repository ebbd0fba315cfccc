"""Central finite-difference check of tape gradients."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor


@dataclass
class InputCheck:
    name: str
    checked: int
    max_abs_err: float
    rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    eps: float
    tol: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def failures(self) -> list:
        return [e for e in self.entries if not e.passed]


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    max_coords: Optional[int] = None,
) -> GradcheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps tensors (one per entry of ``inputs``) to a tensor or a tuple
    of tensors; each output is projected onto a fixed random direction and
    the projections are summed into one scalar. Everything runs in double precision. The error per input is
    normwise: max|analytic - numeric| / max(max|analytic|, max|numeric|).
    With ``max_coords``, larger inputs are checked on a seeded sample of
    coordinates instead of exhaustively.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    names = list(names) if names is not None else [f"input{i}" for i in range(len(arrays))]
    rng = np.random.default_rng(seed)

    with Tape() as tape:
        ts = [tape.watch(Tensor(a)) for a in arrays]
        outs = _as_tuple(f(*ts))
        directions = [rng.standard_normal(o.shape) for o in outs]
        terms = [ops.weighted_sum(o, d) for o, d in zip(outs, directions)]
        loss = functools.reduce(ops.add, terms)
    analytic = tape.gradient(loss, ts)

    def evaluate(args):
        return [o.data for o in _as_tuple(f(*[Tensor(a) for a in args]))]

    def directional(plus, minus):
        # Project the output difference, not two large sums, to limit cancellation.
        return sum(float(np.vdot(p - m, d)) for p, m, d in zip(plus, minus, directions))

    report = GradcheckReport(eps=eps, tol=tol)
    for k, (name, a, ga) in enumerate(zip(names, arrays, analytic)):
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for m, flat in enumerate(coords):
            args = list(arrays)
            plus, minus = a.copy(), a.copy()
            plus.flat[flat] += eps
            minus.flat[flat] -= eps
            args[k] = plus
            out_plus = evaluate(args)
            args[k] = minus
            numeric[m] = directional(out_plus, evaluate(args)) / (2 * eps)
        an = ga.reshape(-1)[coords]
        abs_err = float(np.max(np.abs(an - numeric), initial=0.0))
        scale = max(float(np.max(np.abs(an), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
        rel = abs_err / scale if scale > 0 else abs_err
        report.entries.append(InputCheck(name, int(coords.size), abs_err, rel, rel <= tol))
    return report


def _as_tuple(out) -> tuple:
    return tuple(out) if isinstance(out, (tuple, list)) else (out,)

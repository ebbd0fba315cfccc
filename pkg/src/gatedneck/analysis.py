"""Parameter/FLOP accounting, baseline-vs-full deltas and latency benchmarks.

FLOP convention: one multiply-accumulate counts as 2 FLOPs. Conv bias adds
are folded into that count; activations and gating multiplies cost one FLOP
per output element; pooling costs window-size per output; nearest upsample
and concat are data movement and cost nothing. The stub backbone is not
counted.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core.tensor import Tensor
from .pyramid import NeckConfig, NeckGraph

FLOP_CONVENTION = ("1 multiply-accumulate = 2 FLOPs; bias folded into conv; "
                   "activation/gating = 1 FLOP per element; pooling = window x outputs; "
                   "upsample/concat = 0; backbone excluded")

# Complexity added by the full model over its baseline, as reported in the source ablation.
REFERENCE_DELTA = {"params": 1.5e6, "gflops": 3.6}


@dataclass
class CountRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CountReport:
    rows: list
    input_size: tuple
    config: dict
    delta: Optional["CountReport"] = None
    header: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def row(self, name: str) -> CountRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = {
            "flop_convention": FLOP_CONVENTION,
            "header": self.header,
            "input_size": list(self.input_size),
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "totals": {"params": self.params, "flops": self.flops,
                       "params_m": self.params / 1e6, "gflops": self.flops / 1e9},
        }
        if self.delta is not None:
            d["delta"] = self.delta.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format(self) -> str:
        lines = [f"# FLOPs: {FLOP_CONVENTION}",
                 f"# input {self.input_size[0]}x{self.input_size[1]}"]
        lines += [f"# {h}" for h in self.header]
        lines.append(_table(self.rows, self.params, self.flops))
        return "\n".join(lines)


def _table(rows, params, flops) -> str:
    w = max([len(r.name) for r in rows] + [5])
    k = max([len(r.kind) for r in rows] + [4])
    out = [f"{'block':<{w}}  {'kind':<{k}}  {'params':>12}  {'GFLOPs':>10}"]
    out += [f"{r.name:<{w}}  {r.kind:<{k}}  {r.params:>12,d}  {r.flops / 1e9:>10.4f}" for r in rows]
    out.append(f"{'total':<{w}}  {'':<{k}}  {params:>12,d}  {flops / 1e9:>10.4f}")
    return "\n".join(out)


def _graph(g) -> NeckGraph:
    return g if isinstance(g, NeckGraph) else NeckGraph(g)


def count_params(graph) -> CountReport:
    return count_flops(graph)


def count_flops(graph, input_size=None, batch: int = 1) -> CountReport:
    """Per-block parameter and FLOP tallies at ``input_size`` (defaults to the config's)."""
    graph = _graph(graph)
    if input_size is not None:
        graph = NeckGraph(graph.cfg.replace(input_size=input_size), graph.name)
    rows = [CountRow(*r) for r in graph.count_rows(batch)]
    return CountReport(rows, graph.cfg.input_size, graph.cfg.to_dict())


def delta_report(cfg_a: NeckConfig, cfg_b: NeckConfig, input_size=None) -> CountReport:
    """Counts for ``cfg_b`` with row-wise deltas (b - a) attached."""
    a = count_flops(cfg_a, input_size)
    b = count_flops(cfg_b, input_size)
    names = [r.name for r in b.rows]
    if names != [r.name for r in a.rows]:
        raise ValueError("configs produce different block slots")
    rows = [CountRow(rb.name, f"{ra.kind} -> {rb.kind}" if ra.kind != rb.kind else rb.kind,
                     rb.params - ra.params, rb.flops - ra.flops)
            for ra, rb in zip(a.rows, b.rows)]
    b.delta = CountReport(rows, b.input_size, {"from": cfg_a.to_dict(), "to": cfg_b.to_dict()})
    b.header = [
        f"baseline: use_au={cfg_a.use_au} use_ad={cfg_a.use_ad} use_csp_pac={cfg_a.use_csp_pac}",
        f"compared: use_au={cfg_b.use_au} use_ad={cfg_b.use_ad} use_csp_pac={cfg_b.use_csp_pac}",
        f"assumptions: hidden_dim={cfg_b.hidden_dim}, baseline = nearest upsample, "
        "3x3 stride-2 conv downsample, CSP with three 3x3 convs",
    ]
    return b


def format_delta(report: CountReport) -> str:
    d = report.delta
    lines = [report.format(), "", "# delta (compared - baseline)", _table(d.rows, d.params, d.flops),
             f"measured delta: {d.params / 1e6:+.3f} M params, {d.flops / 1e9:+.3f} GFLOPs",
             f"reference:      {REFERENCE_DELTA['params'] / 1e6:+.1f} M params, "
             f"{REFERENCE_DELTA['gflops']:+.1f} GFLOPs (approximate, includes unbuilt parts)"]
    return "\n".join(lines)


@dataclass
class BenchResult:
    name: str
    input_dims: list
    iterations: int
    warmup: int
    min_ms: float
    median_ms: float
    p95_ms: float
    throughput: float  # input scalars per second at the median
    threads: int = 1

    @classmethod
    def from_times(cls, name, input_dims, times, warmup, threads=1):
        ms = sorted(t * 1e3 for t in times)
        p95 = float(np.percentile(ms, 95, method="higher"))
        med = statistics.median(ms)
        scalars = int(sum(np.prod(d) for d in input_dims))
        return cls(name, [list(d) for d in input_dims], len(ms), warmup, ms[0], med, p95,
                   scalars * threads / (med / 1e3) if med > 0 else float("inf"), threads)


MIN_ITERS = 10


def _check_iters(iters):
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}, got {iters}")


def bench_latency(fn: Callable, inputs, name: str = "graph", iters: int = 30, warmup: int = 5,
                  threads: int = 1) -> BenchResult:
    """Time ``fn(*inputs)`` with a monotonic clock after ``warmup`` untimed calls.

    With ``threads > 1`` each timed iteration runs ``threads`` concurrent
    forward passes on distinct copies of the inputs (throughput mode).
    """
    _check_iters(iters)
    for _ in range(warmup):
        fn(*inputs)
    times = []
    if threads == 1:
        for _ in range(iters):
            t0 = time.perf_counter()
            fn(*inputs)
            times.append(time.perf_counter() - t0)
    else:
        copies = [[Tensor(t.data) for t in inputs] for _ in range(threads)]
        with ThreadPoolExecutor(threads) as pool:
            for _ in range(iters):
                t0 = time.perf_counter()
                list(pool.map(lambda args: fn(*args), copies))
                times.append(time.perf_counter() - t0)
    return BenchResult.from_times(name, [t.shape for t in inputs], times, warmup, threads)


def bench_pair(fn_a: Callable, fn_b: Callable, inputs, names=("a", "b"), iters: int = 30,
               warmup: int = 5) -> tuple:
    """Benchmark two callables on the same inputs with interleaved iterations,
    so slow drift of the machine affects both equally."""
    _check_iters(iters)
    for _ in range(warmup):
        fn_a(*inputs)
        fn_b(*inputs)
    ta, tb = [], []
    for i in range(iters):
        order = ((fn_a, ta), (fn_b, tb)) if i % 2 == 0 else ((fn_b, tb), (fn_a, ta))
        for fn, acc in order:
            t0 = time.perf_counter()
            fn(*inputs)
            acc.append(time.perf_counter() - t0)
    dims = [t.shape for t in inputs]
    return (BenchResult.from_times(names[0], dims, ta, warmup),
            BenchResult.from_times(names[1], dims, tb, warmup))


def neck_inputs(cfg: NeckConfig, batch: int = 1, seed: int = 0, dtype=np.float32) -> list:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return [Tensor(rng.uniform(0.0, 1.0, size=s), dtype=dtype)
            for s in NeckGraph(cfg).input_shapes(batch)]


def format_bench(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'graph':<{w}}  {'iters':>5}  {'min ms':>9}  {'median ms':>9}  {'p95 ms':>9}  {'Mscalar/s':>10}"]
    for r in results:
        lines.append(f"{r.name:<{w}}  {r.iterations:>5}  {r.min_ms:>9.3f}  {r.median_ms:>9.3f}  "
                     f"{r.p95_ms:>9.3f}  {r.throughput / 1e6:>10.2f}")
    return "\n".join(lines)

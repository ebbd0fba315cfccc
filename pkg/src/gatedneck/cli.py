"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (MIN_ITERS, bench_latency, bench_pair, count_flops, delta_report,
                       format_bench, format_delta, neck_inputs)
from .core.gradcheck import gradcheck
from .core.tensor import Tensor
from .io import (FormatError, atomic_write, check_checkpoint, load_checkpoint, load_image_pnm,
                 load_tensor, save_checkpoint, save_tensor)
from .neck import CSPPAC, PAC, AttentionDownsample, AttentionUpsample, ChannelGate
from .pyramid import ConfigError, Model, NeckConfig, NeckGraph

log = logging.getLogger("gatedneck")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DTYPES = {"f32": np.float32, "f64": np.float64}
TINY_CONFIG = NeckConfig(hidden_dim=8, input_size=(64, 64), in_channels=(8, 8, 8))


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: list
    config: dict
    seed: int
    precision: str
    input: str
    outputs: list = field(default_factory=list)
    tool_version: str = __version__

    def write(self, path) -> None:
        atomic_write(path, (json.dumps(asdict(self), indent=2) + "\n").encode())


def _load_config(args, default=NeckConfig()) -> NeckConfig:
    cfg = NeckConfig.load(args.config) if args.config else default
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(args, payload: dict, cfg: NeckConfig, argv) -> None:
    if not args.json:
        return
    path = Path(args.json)
    atomic_write(path, (json.dumps(payload, indent=2) + "\n").encode())
    RunManifest(list(argv), cfg.to_dict(), cfg.seed, args.precision, "none",
                [str(path)]).write(path.with_name(path.name + ".manifest.json"))


def synthetic_image(spec: str, seed: int) -> Tensor:
    m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", spec)
    if not m:
        raise UsageError(f"synthetic input must look like NxHxW (e.g. 1x320x320), got {spec!r}")
    n, h, w = (int(v) for v in m.groups())
    # Jumped stream: independent of the parameter draws under the same seed.
    rng = np.random.Generator(np.random.Philox(key=seed).jumped())
    return Tensor(rng.uniform(0.0, 1.0, size=(n, 3, h, w)), dtype=np.float64)


def read_input(spec: str, seed: int) -> Tensor:
    if spec.startswith("synthetic:"):
        return synthetic_image(spec.split(":", 1)[1], seed)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"cannot read input {spec}")
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return load_image_pnm(path)
    return load_tensor(path)


def cmd_forward(args, argv) -> int:
    cfg = _load_config(args)
    dtype = DTYPES[args.precision]
    model = Model(cfg)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        check_checkpoint(params, model.param_shapes())
        params = {k: v.astype(dtype) for k, v in params.items()}
    else:
        params = model.init_params(dtype)
    source = args.input or "synthetic:1x{}x{}".format(*cfg.input_size)
    image = read_input(source, cfg.seed)
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise UsageError(f"input must be an (n, 3, H, W) image, got dims {image.shape}")
    if image.shape[2] % 32 or image.shape[3] % 32:
        raise UsageError(f"input size {image.shape[2]}x{image.shape[3]} must be divisible by 32")
    outs = model(params, image.astype(dtype))

    out_dir = Path(args.out_dir)
    written = []
    for name, t in zip(("n3", "n4", "n5"), outs):
        path = out_dir / f"{name}.aft"
        save_tensor(path, t)
        written.append(str(path))
        print(f"{name}: {list(t.shape)} -> {path}")
    if args.save_checkpoint:
        save_checkpoint(args.save_checkpoint, params)
        written.append(str(args.save_checkpoint))
    RunManifest(list(argv), cfg.to_dict(), cfg.seed, args.precision, source,
                written).write(out_dir / "manifest.json")
    return EXIT_OK


GRADCHECK_BLOCKS = ("channel_gate", "attention_upsample", "attention_downsample", "pac",
                    "csp_pac", "neck")


def gradcheck_targets(cfg: NeckConfig) -> list:
    """(name, module, input shapes, call) for each block checked by ``gradcheck``."""
    h = cfg.hidden_dim
    _, (s4, _), (s5, _) = cfg.level_sizes
    graph = NeckGraph(cfg)
    neck_shapes = [(1, h, hh, ww) for hh, ww in cfg.level_sizes]
    return [
        ("channel_gate", ChannelGate("gate", h), [(1, h, s4, s4)], None),
        ("attention_upsample", AttentionUpsample("au", h), [(1, h, s5, s5)], None),
        ("attention_downsample", AttentionDownsample("ad", h), [(1, h, s4, s4)], None),
        ("pac", PAC("pac", h // 2), [(1, h // 2, s4, s4)], None),
        ("csp_pac", CSPPAC("csp_pac", 2 * h, h, mid_channels=h // 2), [(1, 2 * h, s4, s4)], None),
        ("neck", graph, neck_shapes, graph.forward_neck),
    ]


def run_gradcheck(cfg: NeckConfig, eps: float, tol: float, max_coords=None, only=None) -> list:
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for name, module, shapes, call in gradcheck_targets(cfg):
        if only and name not in only:
            continue
        params = module.init_params(cfg.seed, np.float64)
        names = [k for k in params if not k.startswith(f"{module.name}.proj")]
        xs = [rng.standard_normal(s) for s in shapes]
        fn = call or module.__call__

        def f(*ts, _fn=fn, _names=names, _params=params, _k=len(shapes)):
            return _fn({**_params, **dict(zip(_names, ts[_k:]))}, *ts[:_k])

        report = gradcheck(f, xs + [params[k].data for k in names],
                           eps=eps, tol=tol, seed=cfg.seed, max_coords=max_coords,
                           names=[f"x{i}" for i in range(len(shapes))] + names)
        rows.append((name, report))
    return rows


def cmd_gradcheck(args, argv) -> int:
    cfg = _load_config(args, TINY_CONFIG)
    rows = run_gradcheck(cfg, args.eps, args.tol, args.max_coords, args.blocks)
    print(f"# gradcheck float64, eps={args.eps:g}, tol={args.tol:g}, hidden={cfg.hidden_dim}, "
          f"levels={[s for s, _ in cfg.level_sizes]}")
    print(f"{'block':<22} {'inputs':>6} {'max rel err':>12}  result")
    failed = []
    for name, rep in rows:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:<22} {len(rep.entries):>6} {rep.max_rel_err:>12.3e}  {status}")
        for e in rep.failures():
            print(f"    {name}: {e.name} rel_err={e.rel_err:.3e}")
        if not rep.passed:
            failed.append(name)
    payload = {"eps": args.eps, "tol": args.tol, "passed": not failed,
               "blocks": [{"name": n, "passed": r.passed, "max_rel_err": r.max_rel_err,
                           "inputs": [asdict(e) for e in r.entries]} for n, r in rows]}
    _write_json(args, payload, cfg, argv)
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_count(args, argv) -> int:
    cfg = _load_config(args)
    size = args.input_size
    if args.baseline is None:
        report = count_flops(cfg, size)
        print(report.format())
    else:
        if args.baseline == "off":
            base = cfg.replace(use_au=False, use_ad=False, use_csp_pac=False)
        else:
            base = NeckConfig.load(args.baseline)
        report = delta_report(base, cfg, size)
        print(format_delta(report))
    _write_json(args, report.to_dict(), cfg, argv)
    return EXIT_OK


TOGGLES = {"au": "use_au", "ad": "use_ad", "csp_pac": "use_csp_pac"}


def cmd_bench(args, argv) -> int:
    if args.iters < MIN_ITERS:
        raise UsageError(f"--iters must be >= {MIN_ITERS}, got {args.iters}")
    cfg = _load_config(args)
    dtype = DTYPES[args.precision]
    inputs = neck_inputs(cfg, seed=cfg.seed, dtype=dtype)

    def runner(c):
        g = NeckGraph(c)
        p = g.init_params(c.seed, dtype)
        return lambda *xs: g(p, *xs)

    if args.compare == "none":
        results = [bench_latency(runner(cfg), inputs, "neck", args.iters, args.warmup, args.threads)]
    else:
        flag = TOGGLES[args.compare]
        on, off = cfg.replace(**{flag: True}), cfg.replace(**{flag: False})
        results = list(bench_pair(runner(on), runner(off), inputs,
                                  (f"{args.compare}=on", f"{args.compare}=off"),
                                  args.iters, args.warmup))
        if args.threads > 1:
            results.append(bench_latency(runner(cfg), inputs, f"neck x{args.threads} threads",
                                         args.iters, args.warmup, args.threads))
    print(f"# hidden={cfg.hidden_dim} input={cfg.input_size[0]}x{cfg.input_size[1]} "
          f"precision={args.precision} warmup={args.warmup} (monotonic clock, ms per forward)")
    print(format_bench(results))
    _write_json(args, {"results": [asdict(r) for r in results]}, cfg, argv)
    return EXIT_OK


def cmd_dump_config(args, argv) -> int:
    print(json.dumps(_load_config(args).to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON neck config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override config seed (u64)")
    common.add_argument("--precision", choices=sorted(DTYPES), default=argparse.SUPPRESS)
    common.add_argument("--json", default=argparse.SUPPRESS, help="also write the report as JSON")

    parser = argparse.ArgumentParser(prog="gatedneck", parents=[common],
                                     description="Gated resampling / parallel-dilation neck toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", parents=[common], help="run backbone stub + neck, write N3/N4/N5")
    p.add_argument("--input", help="PGM/PPM image, AFT1 tensor file, or synthetic:NxHxW")
    p.add_argument("--checkpoint", help="AFCK checkpoint to load instead of seeded init")
    p.add_argument("--save-checkpoint", help="write the parameters used to this AFCK file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every block (defaults to a tiny config)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--max-coords", type=int, default=None,
                   help="check at most this many coordinates per tensor (default: all)")
    p.add_argument("--blocks", nargs="+", choices=GRADCHECK_BLOCKS, help="restrict to these blocks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count", parents=[common], help="parameter and FLOP counts, optional delta")
    p.add_argument("--baseline", help="baseline config path, or 'off' for all toggles disabled")
    p.add_argument("--input-size", type=int, nargs="+", metavar="PX",
                   help="input size override: one value (square) or height width")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", parents=[common], help="forward latency microbenchmark")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--compare", choices=["none", *TOGGLES], default="csp_pac",
                   help="also time the graph with this toggle on and off, interleaved")
    p.add_argument("--threads", type=int, default=1, help="parallel-input throughput mode")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-config", parents=[common], help="print the effective config as JSON")
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    for name, default in (("config", None), ("seed", None), ("precision", "f32"), ("json", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if getattr(args, "input_size", None) is not None:
        if len(args.input_size) not in (1, 2):
            parser.error("--input-size takes one or two values")
        args.input_size = tuple(args.input_size) * (2 // len(args.input_size))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, ["gatedneck", *argv])
    except (UsageError, ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        log.debug("shape or value error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

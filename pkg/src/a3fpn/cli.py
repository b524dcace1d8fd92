"""Command-line entry point.

Exit statuses: 0 success, 1 a check failed, 2 bad usage or input.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .engine import Tensor
from .engine.io import load_a3t, save_a3t
from .errors import A3Error, UsageError
from .pyramid import (
    PRESETS,
    desk_config,
    dump_config,
    forward,
    jitter_weights,
    load_weights,
    parse_overrides,
    preset,
    seeded_init,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
GRADCHECK_MAX_ELEMENTS = 65536


def _config(args):
    if getattr(args, "config", None):
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_overrides(text, preset(args.preset) if getattr(args, "preset", None) else None)
    else:
        cfg = preset(getattr(args, "preset", None) or "full")
    if getattr(args, "set", None):
        cfg = parse_overrides("\n".join(args.set), cfg)
    return cfg


def cmd_forward(args) -> int:
    cfg = _config(args)
    weights = load_weights(args.weights, cfg) if args.weights else seeded_init(cfg, args.seed)
    if len(args.inputs) != cfg.n_levels:
        raise UsageError(f"expected {cfg.n_levels} input files, got {len(args.inputs)}")
    inputs = [load_a3t(p) for p in args.inputs]
    outputs = forward(cfg, weights, inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, y in enumerate(outputs, 1):
        save_a3t(out / f"level{i}.a3t", y)
        d = y.data.astype(np.float64)
        lines.append(f"level={i} min={d.min():.6g} max={d.max():.6g} mean={d.mean():.6g} std={d.std():.6g}")
    if args.stats:
        (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import end_to_end_check

    if not args.eps > 0:
        raise UsageError(f"--eps must be positive, got {args.eps}")
    if not args.tol > 0:
        raise UsageError(f"--tol must be positive, got {args.tol}")
    cfg = _config(args) if args.config else desk_config()
    weights = jitter_weights(seeded_init(cfg, args.seed), 0.1, args.seed)
    rng = np.random.default_rng(args.seed)
    shapes = [(1, cfg.channels[i], args.size >> i, args.size >> i) for i in range(cfg.n_levels)]
    total = weights.total_size() + sum(int(np.prod(s)) for s in shapes)
    if total > GRADCHECK_MAX_ELEMENTS:
        raise UsageError(f"config has {total} parameter and input elements; gradcheck allows at most "
                         f"{GRADCHECK_MAX_ELEMENTS}")
    inputs = [rng.standard_normal(s) for s in shapes]
    report = end_to_end_check(cfg, weights, inputs, eps=args.eps, tol=args.tol, seed=args.seed,
                              corrupt=args.corrupt)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_infoflow(args) -> int:
    from .infoflow import bsc_trials

    reports = bsc_trials(args.hops, args.p, args.trials, args.seed)
    for r in reports:
        print(r.line())
    passed = sum(r.passed for r in reports)
    print(f"trials={len(reports)} passed={passed} pass={str(passed == len(reports)).lower()}")
    return EXIT_OK if passed == len(reports) else EXIT_CHECK


def cmd_dump_config(args) -> int:
    sys.stdout.write(dump_config(_config(args)))
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    from .heatmap import select_plane, write_pgm

    x = load_a3t(args.input)
    plane = select_plane(x, None if args.mean else args.channel, args.item)
    write_pgm(args.out, plane)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a3fpn", description="Multi-scale feature fusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p, presets=True):
        p.add_argument("--config", help="key=value config file")
        if presets:
            p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default full)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("forward", help="run the pyramid on A3T inputs")
    config_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights", help="A3W1 weight file")
    src.add_argument("--seed", type=int, default=0, help="seed for initial weights")
    p.add_argument("--inputs", nargs="+", required=True, help="one A3T file per level, finest first")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stats", action="store_true", help="also write stats.txt")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=16, help="finest spatial size")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infoflow", help="information retained along BSC chains")
    p.add_argument("--hops", type=int, default=1)
    p.add_argument("--p", type=float, default=0.1, help="crossover probability in [0, 0.5]")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infoflow)

    p = sub.add_parser("dump-config", help="print a config as key=value lines")
    config_flags(p)
    p.set_defaults(func=cmd_dump_config)

    p = sub.add_parser("export-heatmap", help="write one plane of an A3T tensor as PGM")
    p.add_argument("--input", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--channel", type=int)
    which.add_argument("--mean", action="store_true", help="average over channels")
    p.add_argument("--item", type=int, default=0, help="batch item")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (A3Error, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

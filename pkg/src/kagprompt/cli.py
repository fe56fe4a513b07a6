"""Command-line entry point.

    kagprompt [--config FILE] [--seed N] [--out-dir DIR] COMMAND [options] [--key value ...]

Any ``--key value`` pair that is not a command option overrides the matching
run-configuration key (``--T 3``, ``--gamma 0.2``, ``--kernel-enabled false``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config, parse_overrides
from .gradcheck import composition_grad_check
from .pgm import write_pgm
from .synth import dump_dataset

CHECKPOINT_NAME = "checkpoint.kagp"

logger = logging.getLogger("kagprompt")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="FILE", help="key = value configuration file", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
    p.add_argument("--out-dir", metavar="DIR", help="output directory (default: out)", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kagprompt", description="Graph-prompted few-shot anomaly detection on toy data.")
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    add("train", "train and write the checkpoint plus a per-epoch loss CSV")
    p = add("eval", "score the test split and write metrics.csv")
    p.add_argument("--checkpoint", metavar="PATH", help=f"default: OUT_DIR/{CHECKPOINT_NAME}")
    p = add("sweep", "train+evaluate once per value of one parameter")
    p.add_argument("--param", required=True, choices=tr.SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p = add("render", "write fused anomaly heatmaps of test images as PGM")
    p.add_argument("--checkpoint", metavar="PATH", help=f"default: OUT_DIR/{CHECKPOINT_NAME}")
    p.add_argument("--indices", help="comma-separated test indices (default: all)")
    add("dump-data", "write the synthetic dataset as PGM images and masks")
    p = add("grad-check", "finite-difference check of the full training path")
    p.add_argument("--seeds", type=int, default=20, help="number of random instances (default 20)")
    p.add_argument("--iterations", type=int, default=2, help="message-passing rounds in the check (default 2)")
    return parser


def _config(args, extra: list[str], base: RunConfig | None = None) -> RunConfig:
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return parse_config(args.config, overrides, base=base)


def _load(args, out_dir: str):
    path = args.checkpoint or os.path.join(out_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise CheckpointError(f"no checkpoint at {path}; run 'kagprompt train' first")
    return load_checkpoint(path)


def _print_report(report: dict[str, float]) -> None:
    for k, v in report.items():
        print(f"{k:12s} {v:.6f}")


def cmd_train(args, extra, out_dir) -> int:
    cfg = _config(args, extra)
    ckpt, history = tr.train(cfg)
    save_checkpoint(ckpt, os.path.join(out_dir, CHECKPOINT_NAME))
    rows = [("train", f"loss_epoch_{e + 1:04d}", v) for e, v in enumerate(history)]
    tr.write_csv(rows, os.path.join(out_dir, "loss.csv"))
    if history:
        print(f"epochs {len(history)}: loss {history[0]:.6f} -> {history[-1]:.6f}")
    print(f"wrote {os.path.join(out_dir, CHECKPOINT_NAME)}")
    return 0


def cmd_eval(args, extra, out_dir) -> int:
    ckpt = _load(args, out_dir)
    cfg = _config(args, extra, base=ckpt.config)
    report = tr.evaluate(ckpt, cfg, csv_path=os.path.join(out_dir, "metrics.csv"))
    _print_report(report)
    return 0


def cmd_sweep(args, extra, out_dir) -> int:
    cfg = _config(args, extra)
    values = [v for v in args.values.split(",") if v.strip()]
    path = os.path.join(out_dir, f"sweep_{args.param}.csv")
    rows = tr.sweep(args.param, values, cfg, csv_path=path)
    for run, metric, value in rows:
        print(f"{run:16s} {metric:12s} {value:.6f}")
    print(f"wrote {path}")
    return 0


def cmd_render(args, extra, out_dir) -> int:
    ckpt = _load(args, out_dir)
    cfg = _config(args, extra, base=ckpt.config)
    pred = tr.predict(ckpt, cfg)
    n = len(pred.M)
    idx = range(n) if not args.indices else [int(i) for i in args.indices.split(",")]
    dest = os.path.join(out_dir, "heatmaps")
    os.makedirs(dest, exist_ok=True)
    for i in idx:
        if not 0 <= i < n:
            raise IndexError(f"test index {i} out of range [0, {n})")
        # the fused map is a convex combination of [0, 1] maps; clip rounding spill only
        write_pgm(np.clip(pred.M[i], 0.0, 1.0), os.path.join(dest, f"test_{i:05}_map.pgm"))
        write_pgm(pred.masks[i].astype(np.float64), os.path.join(dest, f"test_{i:05}_mask.pgm"))
    print(f"wrote {len(idx)} heatmaps to {dest}")
    return 0


def cmd_dump_data(args, extra, out_dir) -> int:
    cfg = _config(args, extra)
    ws = tr.prepare(cfg)
    paths = dump_dataset(ws.dataset, os.path.join(out_dir, "data"))
    print(f"wrote {len(paths)} files to {os.path.join(out_dir, 'data')}")
    return 0


def cmd_grad_check(args, extra, out_dir) -> int:
    cfg = _config(args, extra)
    rows, ok = [], True
    for s in range(args.seeds):
        seed = cfg.seed + s
        report = composition_grad_check(seed, T=args.iterations)
        print(f"seed {seed}: {report}")
        rows.append((f"seed={seed}", "max_rel_error", report.max_rel_error))
        ok &= report.passed
    tr.write_csv(rows, os.path.join(out_dir, "grad_check.csv"))
    print("all passed" if ok else "FAILED")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "render": cmd_render,
    "dump-data": cmd_dump_data,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    for name in ("config", "seed", "out_dir", "checkpoint"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out_dir = args.out_dir or "out"
    os.makedirs(out_dir, exist_ok=True)
    try:
        return COMMANDS[args.command](args, extra, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, tr.TrainingDivergedError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

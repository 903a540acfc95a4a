"""Command-line entry points.

    python3 -m clearcomm.cli train  --config exp.cfg [--seed N] [--out DIR]
                                    [--force] [--ablate]
    python3 -m clearcomm.cli eval   --config exp.cfg [--seed N] [--out DIR]
    python3 -m clearcomm.cli ablate --config exp.cfg [--seed N] [--out DIR]
                                    [--force]
    python3 -m clearcomm.cli smoke  [--seed N] [--out DIR] [--force]

`train` runs the full experiment; `ablate` is train with the paired
with/without-denoiser comparison forced on; `eval` redoes the grid from an
existing checkpoint; `smoke` runs the built-in tiny preset end to end.
CLEAR_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import load_config, load_preset
from .runner import evaluate_from_checkpoint, run_experiment


def _add_common(p, config_required=True):
    if config_required:
        p.add_argument("--config", required=True,
                       help="experiment config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed (u64)")
    p.add_argument("--out", default=None,
                   help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clearcomm")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, evaluate, and persist a run")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing run directory")
    p.add_argument("--ablate", action="store_true",
                   help="also emit the paired denoiser on/off CSV")

    p = sub.add_parser("eval", help="re-evaluate from a saved checkpoint")
    _add_common(p)

    p = sub.add_parser("ablate",
                       help="train with the paired comparison forced on")
    _add_common(p)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("smoke", help="run the built-in tiny preset")
    _add_common(p, config_required=False)
    p.add_argument("--force", action="store_true")
    return ap


def _load(args):
    cfg = load_preset("smoke") if args.command == "smoke" \
        else load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "eval":
            evaluate_from_checkpoint(cfg)
        elif args.command == "ablate":
            run_experiment(cfg, force=args.force, ablate=True)
        else:
            run_experiment(cfg, force=args.force,
                           ablate=getattr(args, "ablate", False))
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

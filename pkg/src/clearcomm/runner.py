"""Experiment orchestration: one run owns one output directory and leaves
four artifacts behind (checkpoint, loss history CSV, evaluation CSV, run
manifest), plus a paired ablation CSV on request.

(config, seed) determines the checkpoint and CSV bytes exactly; the
manifest additionally records wall time, which is the one value allowed
to differ between reruns.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time

from .checkpoint import load_checkpoint, make_checkpoint, save_checkpoint
from .config import ExperimentConfig, render_config
from .datasets import load_dataset
from .pipeline import (EvalResult, evaluate_grid, init_model,
                       paired_ablation, train_clear)

CSV_HEADER = "snr_test_db,channel,ds,pn,rate,trials,mean_psnr_db,mean_mse"
CHECKPOINT_NAME = "checkpoint.clr"
LOSS_CSV_NAME = "loss_history.csv"
EVAL_CSV_NAME = "evaluation.csv"
MANIFEST_NAME = "manifest.json"
ABLATION_CSV_NAME = "ablation.csv"


def _sig6(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return f"{v:.6g}"


def emit_csv(result: EvalResult, path: str):
    """Evaluation rows with the fixed header, sorted, 6 significant
    digits, newline-terminated."""
    rows = sorted(result.rows, key=lambda r: (r["channel"], r["ds"],
                                              r["pn"], r["rate"],
                                              r["snr_test_db"]))
    cols = CSV_HEADER.split(",")
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join(_sig6(r[c]) for c in cols))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _write_loss_csv(history, path):
    lines = ["epoch,loss"]
    for i, v in enumerate(history, start=1):
        lines.append(f"{i},{v:.6g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()


def run_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, cfg.run_name)


def _channel_condition(cfg: ExperimentConfig):
    ch = cfg.train.channel
    return ("config", ch.profile, ch.doppler_scale, ch.phase_noise_scale)


def run_experiment(cfg: ExperimentConfig, force: bool = False,
                   ablate: bool = False, log=print) -> dict:
    """Train, evaluate, and persist; returns artifact paths and results."""
    t0 = time.monotonic()
    out = run_dir(cfg)
    artifacts = [CHECKPOINT_NAME, LOSS_CSV_NAME, EVAL_CSV_NAME,
                 MANIFEST_NAME]
    if os.path.isdir(out) and not force:
        present = [a for a in artifacts if
                   os.path.exists(os.path.join(out, a))]
        if present:
            raise RuntimeError(f"output directory collision: {out} already "
                               f"holds {', '.join(present)} (use --force)")
    os.makedirs(out, exist_ok=True)
    echo = render_config(cfg)
    log(echo)

    images = load_dataset(cfg.dataset, seed=cfg.seed)
    model, history = train_clear(images, cfg.train, codec_cfg=cfg.codec)
    steps = len(history) * math.ceil(images.shape[0]
                                     / cfg.train.batch_size)
    ckpt = make_checkpoint(model, echo, cfg.seed, steps)
    ckpt_path = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(ckpt, ckpt_path)
    _write_loss_csv(history, os.path.join(out, LOSS_CSV_NAME))

    result = evaluate_grid(model, images, cfg.train, cfg.eval_snrs,
                           rates=tuple(cfg.eval_rates),
                           trials=cfg.eval_trials, seed=cfg.seed + 1000)
    emit_csv(result, os.path.join(out, EVAL_CSV_NAME))

    paths = {"checkpoint": ckpt_path,
             "loss_history": os.path.join(out, LOSS_CSV_NAME),
             "evaluation": os.path.join(out, EVAL_CSV_NAME),
             "manifest": os.path.join(out, MANIFEST_NAME)}
    if ablate:
        trials = max(20, cfg.eval_trials)
        on, off = paired_ablation(model, images, cfg.train, snr_db=20.0,
                                  condition=_channel_condition(cfg),
                                  rate=cfg.codec.compression_rate,
                                  trials=trials, seed=cfg.seed + 2000)
        ab_path = os.path.join(out, ABLATION_CSV_NAME)
        lines = ["trial,psnr_on_db,psnr_off_db"]
        for k in range(trials):
            lines.append(f"{k},{on[k]:.6g},{off[k]:.6g}")
        with open(ab_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        paths["ablation"] = ab_path

    manifest = {"config_hash": config_hash(cfg), "seed": cfg.seed,
                "epochs_run": len(history),
                "final_loss": float(history[-1]),
                "artifacts": sorted(os.path.basename(p)
                                    for p in paths.values()),
                "wall_time_s": round(time.monotonic() - t0, 3)}
    with open(paths["manifest"], "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    log(f"run {cfg.run_name}: {len(history)} epochs, final loss "
        f"{history[-1]:.6g}, artifacts in {out}")
    return {"paths": paths, "model": model, "history": history,
            "result": result}


def evaluate_from_checkpoint(cfg: ExperimentConfig, log=print) -> dict:
    """Rebuild the model from a run's checkpoint and redo the grid."""
    from .checkpoint import apply_checkpoint
    out = run_dir(cfg)
    ckpt_path = os.path.join(out, CHECKPOINT_NAME)
    if not os.path.exists(ckpt_path):
        raise RuntimeError(f"no checkpoint at {ckpt_path}; train first")
    ckpt = load_checkpoint(ckpt_path)
    model = init_model(cfg.codec, cfg.seed,
                       schedule_T=cfg.train.denoise_steps)
    apply_checkpoint(ckpt, model)
    images = load_dataset(cfg.dataset, seed=cfg.seed)
    result = evaluate_grid(model, images, cfg.train, cfg.eval_snrs,
                           rates=tuple(cfg.eval_rates),
                           trials=cfg.eval_trials, seed=cfg.seed + 1000)
    path = os.path.join(out, EVAL_CSV_NAME)
    emit_csv(result, path)
    log(f"evaluated {ckpt_path} -> {path}")
    return {"paths": {"evaluation": path}, "model": model, "result": result}

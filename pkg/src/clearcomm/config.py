"""Experiment configuration: a strict INI-like grammar, a documented
default table, and named desk/full-scale presets.

Grammar: `[section]` headers, `key = value` pairs, `#` comments, blank
lines. Unknown sections or keys are rejected (with the nearest valid key
named); absent keys take the defaults below. `render_config` emits the
fully resolved table in the same grammar, so an echo reparses to itself.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import dataclass, field

from .channel import ChannelConfig
from .codec import CodecConfig
from .pipeline import TrainConfig

# section -> key -> (default string, type tag)
# type tags: i int, f float, b bool, s str, fl float list
DEFAULTS = {
    "run": {
        "name": ("run", "s"),
        "seed": ("0", "i"),
        "out_dir": ("runs", "s"),
    },
    "dataset": {
        "type": ("synthetic", "s"),         # synthetic | directory
        "path": ("", "s"),                  # directory type only
        "pattern": ("checkerboard", "s"),   # checkerboard | gradient | noise
        "count": ("16", "i"),
        "height": ("16", "i"),
        "width": ("16", "i"),
        "crop": ("0", "i"),                 # 0 disables center cropping
    },
    "train": {
        "max_epochs": ("100", "i"),
        "batch_size": ("16", "i"),
        "learning_rate": ("1e-3", "f"),
        "patience": ("10", "i"),
        "min_delta": ("1e-6", "f"),
        "snr_train": ("15", "f"),
        "snr_spread_db": ("0", "f"),
        "grad_clip_norm": ("0", "f"),
        "addm_enabled": ("true", "b"),
        "addm_pretrain_epochs": ("0", "i"),
        "denoise_steps": ("50", "i"),
    },
    "channel": {
        "profile": ("time_varying", "s"),
        "paths": ("3", "i"),
        "max_delay": ("3", "i"),
        "ds": ("0.05", "f"),
        "pn": ("0.05", "f"),
        "snr_db": ("20", "f"),
        "per_path_phase_noise": ("false", "b"),
    },
    "codec": {
        "stages": ("2", "i"),
        "base_filters": ("16", "i"),
        "compression_rate": ("0.6", "f"),
        "snr_conditioning": ("true", "b"),
    },
    "eval": {
        "snrs": ("0,10,20,30", "fl"),
        "trials": ("4", "i"),
        "rates": ("0.3,0.6", "fl"),
    },
}

# ready-made configurations; `smoke` is the tiny everything-on sanity run,
# `desk16` the 16x16 heavy-drift training regime, the last two carry the
# full-scale values (valid to load, far beyond a desk run)
PRESETS = {
    "smoke": """
[run]
name = smoke
[dataset]
pattern = noise
count = 8
height = 8
width = 8
[train]
max_epochs = 200
batch_size = 8
patience = 199
[channel]
paths = 2
max_delay = 2
[codec]
stages = 1
base_filters = 8
[eval]
snrs = 10,20
trials = 2
""",
    "desk16": """
[run]
name = desk16
[dataset]
pattern = noise
count = 16
[train]
snr_train = 15
[channel]
ds = 0.2
pn = 0.2
""",
    "cifar10": """
[run]
name = cifar10
[dataset]
# point type/path at a real directory to use actual data:
# type = directory
# path = data/cifar10
pattern = noise
height = 32
width = 32
count = 50000
[train]
batch_size = 32
[channel]
paths = 8
max_delay = 4
[codec]
base_filters = 64
""",
    "div2k": """
[run]
name = div2k
[dataset]
# type = directory
# path = data/div2k
pattern = noise
height = 300
width = 300
crop = 256
count = 800
[train]
batch_size = 32
[codec]
stages = 4
base_filters = 64
""",
}


@dataclass
class DatasetSpec:
    type: str = "synthetic"
    path: str = ""
    pattern: str = "checkerboard"
    count: int = 16
    height: int = 16
    width: int = 16
    crop: int = 0

    def __post_init__(self):
        if self.type not in ("synthetic", "directory"):
            raise ValueError(f"dataset type must be synthetic or directory, "
                             f"got {self.type!r}")
        if self.type == "synthetic" and self.pattern not in (
                "checkerboard", "gradient", "noise"):
            raise ValueError(f"unknown synthetic pattern {self.pattern!r}")
        if self.count < 1:
            raise ValueError("dataset count must be >= 1")
        if self.crop < 0:
            raise ValueError("crop must be >= 0")

    def image_side(self):
        """Extents after the optional center crop."""
        h = self.crop if self.crop else self.height
        w = self.crop if self.crop else self.width
        return h, w


@dataclass
class ExperimentConfig:
    run_name: str
    seed: int
    out_dir: str
    dataset: DatasetSpec
    train: TrainConfig
    codec: CodecConfig
    eval_snrs: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])
    eval_trials: int = 4
    eval_rates: list = field(default_factory=lambda: [0.3, 0.6])


def _parse_value(raw: str, tag: str, where: str):
    try:
        if tag == "i":
            return int(raw)
        if tag == "f":
            return float(raw)
        if tag == "b":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tag == "fl":
            return [float(p) for p in raw.split(",") if p.strip()]
        return raw
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from exc


def parse_config_text(text: str, source: str = "<string>") -> dict:
    """Parse the grammar into {section: {key: typed value}} with every
    default filled in. Strict: unknown keys name their nearest valid key."""
    values = {sec: {k: _parse_value(d, tag, f"default {sec}.{k}")
                    for k, (d, tag) in keys.items()}
              for sec, keys in DEFAULTS.items()}
    section = None
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ValueError(f"{source}:{ln}: unterminated section "
                                 f"header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in DEFAULTS:
                near = difflib.get_close_matches(section, DEFAULTS, n=1)
                hint = f"; nearest is [{near[0]}]" if near else ""
                raise ValueError(f"{source}:{ln}: unknown section "
                                 f"[{section}]{hint}")
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{ln}: expected key = value, got "
                             f"{stripped!r}")
        if section is None:
            raise ValueError(f"{source}:{ln}: key outside any [section]")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if key not in DEFAULTS[section]:
            near = difflib.get_close_matches(key, DEFAULTS[section], n=1)
            hint = f"; nearest valid key is {near[0]!r}" if near else ""
            raise ValueError(f"{source}:{ln}: unknown key {key!r} in "
                             f"[{section}]{hint}")
        tag = DEFAULTS[section][key][1]
        values[section][key] = _parse_value(raw, tag, f"{source}:{ln}")
    return values


def resolve_config(values: dict) -> ExperimentConfig:
    """Build the typed config from a parsed value table; dataclass
    validators surface invariant violations by name."""
    ds = DatasetSpec(**values["dataset"])
    if ds.type == "directory" and not os.path.isdir(ds.path):
        raise ValueError(f"dataset path does not exist: {ds.path!r}")
    ch = values["channel"]
    channel = ChannelConfig(profile=ch["profile"], L=ch["paths"],
                            max_delay_spread_samples=ch["max_delay"],
                            doppler_scale=ch["ds"],
                            phase_noise_scale=ch["pn"],
                            snr_db=ch["snr_db"],
                            per_path_phase_noise=ch["per_path_phase_noise"])
    tr = values["train"]
    train = TrainConfig(max_epochs=tr["max_epochs"],
                        batch_size=tr["batch_size"],
                        learning_rate=tr["learning_rate"],
                        patience=tr["patience"], min_delta=tr["min_delta"],
                        seed=values["run"]["seed"],
                        snr_train=tr["snr_train"],
                        snr_spread_db=tr["snr_spread_db"],
                        grad_clip_norm=tr["grad_clip_norm"], channel=channel,
                        compression_rate=values["codec"]["compression_rate"],
                        addm_enabled=tr["addm_enabled"],
                        addm_pretrain_epochs=tr["addm_pretrain_epochs"],
                        denoise_steps=tr["denoise_steps"])
    h, w = ds.image_side()
    co = values["codec"]
    codec = CodecConfig(height=h, width=w, stages=co["stages"],
                        base_filters=co["base_filters"],
                        compression_rate=co["compression_rate"],
                        snr_conditioning=co["snr_conditioning"])
    ev = values["eval"]
    if ev["trials"] < 1:
        raise ValueError("eval trials must be >= 1")
    return ExperimentConfig(run_name=values["run"]["name"],
                            seed=values["run"]["seed"],
                            out_dir=values["run"]["out_dir"], dataset=ds,
                            train=train, codec=codec,
                            eval_snrs=ev["snrs"], eval_trials=ev["trials"],
                            eval_rates=ev["rates"])


def load_config(path: str) -> ExperimentConfig:
    """Read, parse, and validate a config file."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return resolve_config(parse_config_text(text, source=path))


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have "
                         f"{', '.join(sorted(PRESETS))}")
    return resolve_config(parse_config_text(PRESETS[name], f"preset:{name}"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: ExperimentConfig) -> str:
    """The fully resolved table, in the config grammar (the run-log echo).
    Rendering then reparsing yields an identical echo."""
    ds, tr, ch, co = cfg.dataset, cfg.train, cfg.train.channel, cfg.codec
    table = {
        "run": {"name": cfg.run_name, "seed": cfg.seed,
                "out_dir": cfg.out_dir},
        "dataset": {"type": ds.type, "path": ds.path, "pattern": ds.pattern,
                    "count": ds.count, "height": ds.height,
                    "width": ds.width, "crop": ds.crop},
        "train": {"max_epochs": tr.max_epochs, "batch_size": tr.batch_size,
                  "learning_rate": tr.learning_rate,
                  "patience": tr.patience, "min_delta": tr.min_delta,
                  "snr_train": tr.snr_train,
                  "snr_spread_db": tr.snr_spread_db,
                  "grad_clip_norm": tr.grad_clip_norm,
                  "addm_enabled": tr.addm_enabled,
                  "addm_pretrain_epochs": tr.addm_pretrain_epochs,
                  "denoise_steps": tr.denoise_steps},
        "channel": {"profile": ch.profile, "paths": ch.L,
                    "max_delay": ch.max_delay_spread_samples,
                    "ds": ch.doppler_scale, "pn": ch.phase_noise_scale,
                    "snr_db": ch.snr_db,
                    "per_path_phase_noise": ch.per_path_phase_noise},
        "codec": {"stages": co.stages, "base_filters": co.base_filters,
                  "compression_rate": co.compression_rate,
                  "snr_conditioning": co.snr_conditioning},
        "eval": {"snrs": cfg.eval_snrs, "trials": cfg.eval_trials,
                 "rates": cfg.eval_rates},
    }
    lines = []
    for sec, keys in table.items():
        lines.append(f"[{sec}]")
        for k, v in keys.items():
            lines.append(f"{k} = {_fmt(v)}")
        lines.append("")
    return "\n".join(lines)

"""Checkpoint persistence.

Binary layout: magic `CLR1`, format version u32, then per-tensor records
(name length u32, name bytes utf-8, rank u32, one extent u32 per axis,
payload little-endian float32), records sorted by name. Everything is a
record: model tensors under `param.`, batch-norm running stats under
`bn.`, Adam moments under `adam.`, and two reserved names carry the
config echo and the RNG cursor as byte-per-float payloads (small integers
are exact in float32, so round-trips are bit-exact).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CLR1"
FORMAT_VERSION = 1
_CONFIG_KEY = "__config__"
_RNG_KEY = "__rng__"


@dataclass
class Checkpoint:
    version: int
    config_text: str
    tensors: dict                 # name -> float32 array (params + bn stats)
    adam: dict = field(default_factory=dict)   # name -> (m, v, step)
    rng_seed: int = 0
    rng_steps: int = 0


def _text_to_f32(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(
        np.float32)


def _f32_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def _rng_to_f32(seed: int, steps: int) -> np.ndarray:
    if not 0 <= seed < 2 ** 64:
        raise ValueError("rng seed must fit in u64")
    if not 0 <= steps < 2 ** 24:
        raise ValueError("rng step counter must fit exactly in float32")
    limbs = [(seed >> (16 * i)) & 0xFFFF for i in range(4)]
    return np.array(limbs + [steps], dtype=np.float32)


def _f32_to_rng(arr: np.ndarray):
    limbs = [int(v) for v in arr]
    seed = sum(l << (16 * i) for i, l in enumerate(limbs[:4]))
    return seed, limbs[4]


def _records(ckpt: Checkpoint) -> dict:
    recs = {_CONFIG_KEY: _text_to_f32(ckpt.config_text),
            _RNG_KEY: _rng_to_f32(ckpt.rng_seed, ckpt.rng_steps)}
    for name, arr in ckpt.tensors.items():
        recs[f"param.{name}"] = np.asarray(arr, dtype=np.float32)
    for name, (m, v, step) in ckpt.adam.items():
        recs[f"adam.m.{name}"] = np.asarray(m, dtype=np.float32)
        recs[f"adam.v.{name}"] = np.asarray(v, dtype=np.float32)
        recs[f"adam.step.{name}"] = np.array([step], dtype=np.float32)
    return recs


def save_checkpoint(ckpt: Checkpoint, path: str):
    if ckpt.version != FORMAT_VERSION:
        raise ValueError(f"cannot write format version {ckpt.version}; "
                         f"this build writes {FORMAT_VERSION}")
    out = [MAGIC, struct.pack("<I", ckpt.version)]
    for name, arr in sorted(_records(ckpt).items()):
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        for ext in arr.shape:
            out.append(struct.pack("<I", ext))
        out.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version} not supported "
                         f"(expected {FORMAT_VERSION})")
    pos, recs = 8, {}
    while pos < len(data):
        nlen = struct.unpack_from("<I", data, pos)[0]
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = struct.unpack_from("<I", data, pos)[0]
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        recs[name] = arr.reshape(shape).copy()
    if _CONFIG_KEY not in recs or _RNG_KEY not in recs:
        raise ValueError(f"{path}: missing reserved records")
    seed, steps = _f32_to_rng(recs.pop(_RNG_KEY))
    config_text = _f32_to_text(recs.pop(_CONFIG_KEY))
    tensors, adam = {}, {}
    for name, arr in recs.items():
        if name.startswith("param."):
            tensors[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            adam.setdefault(name[len("adam.m."):], [None, None, 0])[0] = arr
        elif name.startswith("adam.v."):
            adam.setdefault(name[len("adam.v."):], [None, None, 0])[1] = arr
        elif name.startswith("adam.step."):
            adam.setdefault(name[len("adam.step."):],
                            [None, None, 0])[2] = int(arr[0])
        else:
            raise ValueError(f"{path}: unknown record {name!r}")
    adam = {k: tuple(v) for k, v in adam.items()}
    return Checkpoint(version, config_text, tensors, adam, seed, steps)


def make_checkpoint(model, config_text: str, seed: int,
                    steps: int) -> Checkpoint:
    """Snapshot a trained model (parameters, batch-norm running stats, and
    Adam moments, all quantized once to float32)."""
    tensors = {name: t.data.astype(np.float32)
               for name, t in model.pset.items()}
    for key, st in model.cp.bn.items():
        tensors[f"bnstate.{key}.mean"] = st.running_mean.astype(np.float32)
        tensors[f"bnstate.{key}.var"] = st.running_var.astype(np.float32)
    adam = {}
    for name in model.pset.names():
        m, v, step = model.pset.adam_state(name)
        adam[name] = (m.astype(np.float32), v.astype(np.float32), step)
    return Checkpoint(FORMAT_VERSION, config_text, tensors, adam, seed,
                      steps)


def apply_checkpoint(ckpt: Checkpoint, model):
    """Write a checkpoint's values back into a freshly initialized model of
    the same architecture."""
    for name, t in model.pset.items():
        key = name
        if key not in ckpt.tensors:
            raise ValueError(f"checkpoint lacks tensor {key!r}")
        arr = ckpt.tensors[key].astype(np.float64)
        if arr.shape != t.shape:
            raise ValueError(f"shape mismatch for {key!r}: checkpoint "
                             f"{arr.shape} vs model {t.shape}")
        t.data[...] = arr
    for key, st in model.cp.bn.items():
        st.running_mean[...] = ckpt.tensors[
            f"bnstate.{key}.mean"].astype(np.float64)
        st.running_var[...] = ckpt.tensors[
            f"bnstate.{key}.var"].astype(np.float64)
    for name, (m, v, step) in ckpt.adam.items():
        if name in model.pset:
            model.pset.load_adam_state(name, m.astype(np.float64),
                                       v.astype(np.float64), step)
    return model

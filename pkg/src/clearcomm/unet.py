"""Noise-prediction U-Net conditioned on diffusion time and the channel
state vector.

Conditioning enters as feature-wise affine modulation at every stage: a
zero-initialized linear maps concat(time embedding, CSI vector) to a
per-channel (scale, shift) pair, so an untrained network starts at the
unmodulated path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (conv2d, he_normal, linear, self_attention,
                     sine_time_embedding, transpose_conv2d)
from .optim import ParamSet
from .tensor import Tensor, _as_tensor, concat, relu


@dataclass
class DenoiserConfig:
    channels: int = 64          # feature planes the denoiser sees
    base: int = 32
    depth: int = 2
    time_dim: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be even and >= 2")

    def width(self, d: int) -> int:
        return self.base * 2 ** d

    @property
    def cond_dim(self) -> int:
        return self.time_dim + 3


class Denoiser:
    """Parameter bundle: the shared ParamSet plus this network's prefix."""

    __slots__ = ("pset", "cfg", "prefix")

    def __init__(self, pset: ParamSet, cfg: DenoiserConfig,
                 prefix: str = "denoiser"):
        self.pset = pset
        self.cfg = cfg
        self.prefix = prefix


def init_denoiser(cfg: DenoiserConfig, rng, pset: ParamSet | None = None,
                  prefix: str = "denoiser") -> Denoiser:
    """Allocate U-Net tensors. The output projection and every conditioning
    linear start at zero so the initial prediction is exactly zero."""
    if pset is None:
        pset = ParamSet()

    def conv_block(name, in_c, out_c, k=3):
        pset.add(f"{prefix}.{name}.w",
                 he_normal(rng, (out_c, in_c, k, k), in_c * k * k))
        pset.add(f"{prefix}.{name}.b", np.zeros(out_c))

    def film_block(name, c):
        pset.add(f"{prefix}.{name}.w", np.zeros((2 * c, cfg.cond_dim)))
        pset.add(f"{prefix}.{name}.b", np.zeros(2 * c))

    conv_block("stem", cfg.channels, cfg.base)
    film_block("film.stem", cfg.base)
    for d in range(cfg.depth):
        conv_block(f"down{d}", cfg.width(d), cfg.width(d + 1))
        film_block(f"film.down{d}", cfg.width(d + 1))
    wb = cfg.width(cfg.depth)
    conv_block("mid.c1", wb, wb)
    film_block("film.mid", wb)
    for nm in ("wq", "wk", "wv", "wo"):
        pset.add(f"{prefix}.mid.attn.{nm}", he_normal(rng, (wb, wb), wb))
    conv_block("mid.c2", wb, wb)
    for d in range(cfg.depth - 1, -1, -1):
        w = cfg.width(d)
        # transpose kernels store (in, out, k, k)
        pset.add(f"{prefix}.up{d}.t.w",
                 he_normal(rng, (cfg.width(d + 1), w, 2, 2),
                           cfg.width(d + 1) * 4))
        pset.add(f"{prefix}.up{d}.t.b", np.zeros(w))
        conv_block(f"up{d}.c", 2 * w, w)
        film_block(f"film.up{d}", w)
    pset.add(f"{prefix}.out.w", np.zeros((cfg.channels, cfg.base, 3, 3)))
    pset.add(f"{prefix}.out.b", np.zeros(cfg.channels))
    return Denoiser(pset, cfg, prefix)


def _cond_matrix(t, cond, n: int, cfg: DenoiserConfig) -> Tensor:
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    cv = np.broadcast_to(np.asarray(cond, dtype=np.float64), (n, 3))
    rows = np.empty((n, cfg.cond_dim))
    for i in range(n):
        rows[i, :cfg.time_dim] = sine_time_embedding(int(ts[i]), cfg.time_dim)
        rows[i, cfg.time_dim:] = cv[i]
    return Tensor(rows)


def unet_predict(x_t, t, cond, den: Denoiser) -> Tensor:
    """Predict the injected noise for x_t at step t.

    x_t: (N, C, H, W) with H, W divisible by 2^depth. t: int or (N,) ints.
    cond: length-3 CSI conditioning vector, or (N, 3).
    """
    x = _as_tensor(x_t)
    cfg, pset, pre = den.cfg, den.pset, den.prefix
    if x.data.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"expected (N, {cfg.channels}, H, W), got {x.shape}")
    if x.shape[2] % 2 ** cfg.depth or x.shape[3] % 2 ** cfg.depth:
        raise ValueError(
            f"spatial extents {x.shape[2:]} not divisible by 2^depth")
    cv = np.asarray(cond, dtype=np.float64)
    if cv.shape[-1] != 3:
        raise ValueError(f"conditioning width {cv.shape[-1]} != 3")
    n = x.shape[0]
    cm = _cond_matrix(t, cv, n, cfg)

    def film(h, name):
        c = h.shape[1]
        sb = linear(cm, pset[f"{pre}.{name}.w"], pset[f"{pre}.{name}.b"])
        scale = sb[:, :c].reshape(n, c, 1, 1)
        shift = sb[:, c:].reshape(n, c, 1, 1)
        return h * (scale + 1.0) + shift

    def cb(h, name, stride=1):
        h = conv2d(h, pset[f"{pre}.{name}.w"], stride=stride, padding=1)
        return h + pset[f"{pre}.{name}.b"].reshape(1, -1, 1, 1)

    h = relu(film(cb(x, "stem"), "film.stem"))
    skips = []
    for d in range(cfg.depth):
        skips.append(h)
        h = relu(film(cb(h, f"down{d}", stride=2), f"film.down{d}"))
    h = relu(film(cb(h, "mid.c1"), "film.mid"))
    h = self_attention(h, pset[f"{pre}.mid.attn.wq"],
                       pset[f"{pre}.mid.attn.wk"],
                       pset[f"{pre}.mid.attn.wv"],
                       pset[f"{pre}.mid.attn.wo"])
    h = relu(cb(h, "mid.c2"))
    for d in range(cfg.depth - 1, -1, -1):
        h = transpose_conv2d(h, pset[f"{pre}.up{d}.t.w"], stride=2, padding=0)
        h = h + pset[f"{pre}.up{d}.t.b"].reshape(1, -1, 1, 1)
        h = concat([h, skips[d]], axis=1)
        h = relu(film(cb(h, f"up{d}.c"), f"film.up{d}"))
    return cb(h, "out")

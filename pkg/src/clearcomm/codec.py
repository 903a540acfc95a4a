"""Semantic image codec: strided conv/transpose-conv pyramids with SNR-gated
feature blocks, magnitude-ranked rate selection, and transmit-power
normalization.

Feature planes interleave real and imaginary parts: plane 2i is the real
part and plane 2i+1 the imaginary part of complex symbol stream i, so the
channel count stays even end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csi import COND_SNR_HI, COND_SNR_LO
from .layers import (BatchNormState, batch_norm, conv2d, he_normal, linear,
                     max_pool2d, self_attention, transpose_conv2d)
from .optim import ParamSet
from .tensor import (Tensor, _as_tensor, clamp, concat, mean, relu, sigmoid,
                     sqrt, sum_)


@dataclass
class CodecConfig:
    """Geometry and rate settings shared by encoder and decoder."""

    height: int = 32
    width: int = 32
    stages: int = 2
    base_filters: int = 32
    compression_rate: float = 0.6
    snr_conditioning: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        d = 2 ** self.stages
        if self.height % d or self.width % d:
            raise ValueError(
                f"image extents ({self.height}, {self.width}) must be "
                f"divisible by 2^stages = {d}")
        if self.base_filters < 2 or self.base_filters % 2:
            # even widths keep real/imag plane pairing intact
            raise ValueError("base_filters must be even and >= 2")
        if not 0.0 < self.compression_rate <= 1.0:
            raise ValueError("compression_rate must be in (0, 1]")
        if self.compression_rate * self.feature_count() < 1.0:
            raise ValueError("compression_rate keeps zero coefficients")

    def stage_width(self, s: int) -> int:
        return self.base_filters * 2 ** s

    def feature_shape(self) -> tuple[int, int, int]:
        d = 2 ** self.stages
        return (self.stage_width(self.stages - 1),
                self.height // d, self.width // d)

    def feature_count(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w


class SemanticFeatures:
    """Encoder output: a real tensor of interleaved feature planes plus the
    active-coefficient mask and the per-image power scale recorded by
    normalize_power (None until normalization runs).

    x0 is either (N, C, H', W') with C even, or a flat vector for the
    scalar-granularity selection mode.
    """

    __slots__ = ("x0", "mask", "scale")

    def __init__(self, x0, mask=None, scale=None):
        x0 = _as_tensor(x0)
        if x0.data.ndim == 4:
            if x0.shape[1] % 2:
                raise ValueError("feature plane count must be even")
        elif x0.data.ndim != 1:
            raise ValueError("features must be (N, C, H, W) or flat")
        if mask is None:
            mask = np.ones(x0.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x0.shape:
            raise ValueError(
                f"mask shape {mask.shape} does not match features {x0.shape}")
        self.x0 = x0
        self.mask = mask
        self.scale = scale

    @property
    def shape(self):
        return self.x0.shape


class CodecParams:
    """Trainable tensors (inside a shared ParamSet, names prefixed
    "encoder."/"decoder.") plus the batch-norm running states that ride
    along outside the optimizer."""

    __slots__ = ("pset", "bn")

    def __init__(self, pset: ParamSet, bn: dict):
        self.pset = pset
        self.bn = bn


def _afb_hidden(width: int) -> int:
    return max(width // 4, 4)


def init_codec_params(cfg: CodecConfig, rng, pset: ParamSet | None = None) -> CodecParams:
    """Allocate every encoder/decoder tensor with He-scaled initialization.

    Passing an existing ParamSet lets the pipeline keep one optimizer over
    all parameter groups.
    """
    if pset is None:
        pset = ParamSet()
    bn: dict[str, BatchNormState] = {}

    def conv_block(prefix, in_c, out_c, k):
        pset.add(f"{prefix}.w", he_normal(rng, (out_c, in_c, k, k),
                                          in_c * k * k))
        pset.add(f"{prefix}.b", np.zeros(out_c))

    def stage_tail(prefix, w):
        conv_block(f"{prefix}.res", w, w, 3)
        for nm in ("wq", "wk", "wv", "wo"):
            pset.add(f"{prefix}.attn.{nm}", he_normal(rng, (w, w), w))
        pset.add(f"{prefix}.bn.gamma", np.ones(w))
        pset.add(f"{prefix}.bn.beta", np.zeros(w))
        bn[f"{prefix}.bn"] = BatchNormState(w)
        if cfg.snr_conditioning:
            h = _afb_hidden(w)
            pset.add(f"{prefix}.afb.w1", he_normal(rng, (h, w + 1), w + 1))
            pset.add(f"{prefix}.afb.b1", np.zeros(h))
            pset.add(f"{prefix}.afb.w2", he_normal(rng, (w, h), h))
            pset.add(f"{prefix}.afb.b2", np.zeros(w))

    in_c = 3
    for s in range(cfg.stages):
        w = cfg.stage_width(s)
        conv_block(f"encoder.s{s}.conv", in_c, w, 3)
        stage_tail(f"encoder.s{s}", w)
        in_c = w

    for s in range(cfg.stages - 1, -1, -1):
        w_in = cfg.stage_width(s)
        w_out = cfg.stage_width(s - 1) if s else cfg.base_filters
        # transpose kernels store (in, out, k, k)
        pset.add(f"decoder.s{s}.tconv.w",
                 he_normal(rng, (w_in, w_out, 2, 2), w_in * 4))
        pset.add(f"decoder.s{s}.tconv.b", np.zeros(w_out))
        stage_tail(f"decoder.s{s}", w_out)
    conv_block("decoder.out", cfg.base_filters, 3, 3)
    return CodecParams(pset, bn)


def snr_unit(snr_db: float) -> float:
    """Map snr_db onto [0, 1] with the same window the CSI conditioning
    vector uses."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    return float(np.clip((snr_db - COND_SNR_LO) / (COND_SNR_HI - COND_SNR_LO),
                         0.0, 1.0))


def afb_gains(x: Tensor, snr_db: float, pset: ParamSet, prefix: str) -> Tensor:
    """Per-channel sigmoid gates from pooled features joined with the
    normalized SNR. Shape (N, C, 1, 1)."""
    n, c = x.shape[0], x.shape[1]
    pooled = mean(x, axis=(2, 3))                  # (N, C)
    s = Tensor(np.full((n, 1), snr_unit(snr_db)))
    z = concat([pooled, s], axis=1)                # (N, C+1)
    h = relu(linear(z, pset[f"{prefix}.w1"], pset[f"{prefix}.b1"]))
    g = sigmoid(linear(h, pset[f"{prefix}.w2"], pset[f"{prefix}.b2"]))
    return g.reshape(n, c, 1, 1)                   # gains in (0, 1]


def afb_modulate(x: Tensor, snr_db: float, pset: ParamSet, prefix: str) -> Tensor:
    """Scale each feature channel by its SNR-conditioned gate."""
    return x * afb_gains(x, snr_db, pset, prefix)


def _stage_tail(x, prefix, cp, snr_db, cfg, training):
    pset = cp.pset
    x = batch_norm(x, pset[f"{prefix}.bn.gamma"], pset[f"{prefix}.bn.beta"],
                   cp.bn[f"{prefix}.bn"], training=training)
    x = relu(x)
    r = conv2d(x, pset[f"{prefix}.res.w"], stride=1, padding=1)
    x = relu(x + r + pset[f"{prefix}.res.b"].reshape(1, -1, 1, 1))
    x = self_attention(x, pset[f"{prefix}.attn.wq"], pset[f"{prefix}.attn.wk"],
                       pset[f"{prefix}.attn.wv"], pset[f"{prefix}.attn.wo"])
    if cfg.snr_conditioning:
        x = afb_modulate(x, snr_db, pset, f"{prefix}.afb")
    return x


def encode(image, cp: CodecParams, snr_db: float, cfg: CodecConfig,
           training: bool = False) -> SemanticFeatures:
    """Run the conv/pool pyramid: per stage conv3x3 -> batch norm -> ReLU ->
    residual conv -> self-attention -> SNR gate -> 2x2 max pool.

    image: (N, 3, H, W) scaled to [0, 1].
    """
    x = _as_tensor(image)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) image batch, got {x.shape}")
    if x.shape[2] != cfg.height or x.shape[3] != cfg.width:
        raise ValueError(
            f"image extents {x.shape[2:]} do not match config "
            f"({cfg.height}, {cfg.width})")
    pset = cp.pset
    for s in range(cfg.stages):
        p = f"encoder.s{s}"
        x = conv2d(x, pset[f"{p}.conv.w"], stride=1, padding=1)
        x = x + pset[f"{p}.conv.b"].reshape(1, -1, 1, 1)
        x = _stage_tail(x, p, cp, snr_db, cfg, training)
        x = max_pool2d(x, 2)
    return SemanticFeatures(x)


def rate_select(features: SemanticFeatures, rate: float) -> SemanticFeatures:
    """Keep the highest-magnitude coefficients, zero the rest, record the
    mask for the receiver.

    Plane-structured features rank real/imag pairs by joint magnitude and
    keep ceil(ceil(R*N)/2) pairs per image, so the kept count is ceil(R*N)
    rounded up to even. Flat vectors rank scalars and keep exactly
    ceil(R*N). Gradients pass only through kept coefficients.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must be in (0, 1]")
    x = features.x0
    if x.data.ndim == 1:
        n = x.shape[0]
        keep = int(np.ceil(rate * n))
        if keep < 1:
            raise ValueError("rate keeps zero coefficients")
        if keep == n:
            return SemanticFeatures(x, np.ones(n, dtype=bool), features.scale)
        order = np.argsort(-np.abs(x.data), kind="stable")
        mask = np.zeros(n, dtype=bool)
        mask[order[:keep]] = True
    else:
        nb, c, hh, ww = x.shape
        n = c * hh * ww
        keep = int(np.ceil(rate * n))
        pairs = (keep + 1) // 2
        if pairs < 1:
            raise ValueError("rate keeps zero pairs")
        energy = (x.data[:, 0::2] ** 2 + x.data[:, 1::2] ** 2).reshape(nb, -1)
        mask = np.zeros((nb, c // 2, hh, ww), dtype=bool)
        flat = mask.reshape(nb, -1)
        for i in range(nb):
            order = np.argsort(-energy[i], kind="stable")
            flat[i, order[:pairs]] = True
        mask = np.repeat(mask, 2, axis=1)
        # np.repeat duplicates each pair row into both planes in order, so
        # plane 2i and 2i+1 share one decision
    out = x * Tensor(mask.astype(np.float64))
    return SemanticFeatures(out, mask, features.scale)


def normalize_power(features: SemanticFeatures) -> SemanticFeatures:
    """Rescale each image so its active symbols carry unit average power
    (mean squared complex magnitude = 1); the scale rides along for the
    receiver to invert."""
    x = features.x0
    m = features.mask
    if not m.any():
        raise ValueError("normalize_power needs at least one active symbol")
    mt = Tensor(m.astype(np.float64))
    if x.data.ndim == 1:
        power = sum_(x * x * mt) * (1.0 / m.sum())
        scale = sqrt(power)
        out = x * (Tensor(np.ones(1)) / scale)
        return SemanticFeatures(out, m, scale)
    n_sym = m.sum(axis=(1, 2, 3)) / 2          # active pairs per image
    if np.any(n_sym == 0):
        raise ValueError("normalize_power needs at least one active symbol")
    power = sum_(x * x * mt, axis=(1, 2, 3)) * Tensor(1.0 / n_sym)
    if np.any(power.data <= 0):
        raise ValueError("normalize_power needs nonzero active symbols")
    scale = sqrt(power)                         # (N,)
    inv = (Tensor(np.ones(1)) / scale).reshape(-1, 1, 1, 1)
    return SemanticFeatures(x * inv, m, scale)


def denormalize(features: SemanticFeatures) -> SemanticFeatures:
    """Invert normalize_power using the recorded scale."""
    if features.scale is None:
        raise ValueError("features carry no scale metadata")
    s = features.scale
    if s.data.ndim == 1 and features.x0.data.ndim == 4:
        s = s.reshape(-1, 1, 1, 1)
    return SemanticFeatures(features.x0 * s, features.mask, None)


def decode(features: SemanticFeatures, cp: CodecParams, snr_db: float,
           cfg: CodecConfig, training: bool = False) -> Tensor:
    """Mirror the encoder: per stage transpose-conv 2x2 stride 2 -> batch
    norm -> ReLU -> residual conv -> self-attention -> SNR gate, then a
    final 3x3 projection clamped to [0, 1]."""
    x = features.x0
    want = cfg.feature_shape()
    if x.data.ndim != 4 or tuple(x.shape[1:]) != want:
        raise ValueError(
            f"feature shape {x.shape} does not match config {want}")
    pset = cp.pset
    for s in range(cfg.stages - 1, -1, -1):
        p = f"decoder.s{s}"
        x = transpose_conv2d(x, pset[f"{p}.tconv.w"], stride=2, padding=0)
        x = x + pset[f"{p}.tconv.b"].reshape(1, -1, 1, 1)
        x = _stage_tail(x, p, cp, snr_db, cfg, training)
    x = conv2d(x, pset["decoder.out.w"], stride=1, padding=1)
    x = x + pset["decoder.out.b"].reshape(1, -1, 1, 1)
    return clamp(x, 0.0, 1.0)


def pack_complex(features: SemanticFeatures) -> list[np.ndarray]:
    """Collect each image's active symbols as a complex vector: plane 2i
    feeds the real part, plane 2i+1 the imaginary part, symbols in
    (pair, row, col) order. numpy-level; the autodiff crossing lives in the
    pipeline."""
    x = features.x0.data
    if x.ndim != 4:
        raise ValueError("pack_complex needs plane-structured features")
    pair_mask = features.mask[:, 0::2]
    out = []
    for i in range(x.shape[0]):
        re = x[i, 0::2][pair_mask[i]]
        im = x[i, 1::2][pair_mask[i]]
        out.append(re + 1j * im)
    return out


def unpack_complex(z: list[np.ndarray], mask: np.ndarray) -> np.ndarray:
    """Scatter received complex symbols back onto the feature grid; masked-out
    positions stay zero."""
    n, c = mask.shape[0], mask.shape[1]
    out = np.zeros(mask.shape, dtype=np.float64)
    pair_mask = mask[:, 0::2]
    for i in range(n):
        if len(z[i]) != pair_mask[i].sum():
            raise ValueError("symbol count does not match mask")
        re = out[i, 0::2]
        im = out[i, 1::2]
        re[pair_mask[i]] = z[i].real
        im[pair_mask[i]] = z[i].imag
        out[i, 0::2] = re
        out[i, 1::2] = im
    return out

"""Neural layers on NCHW tensors: convolution and its adjoint, batch norm,
max pooling, single-head self-attention, and the sinusoidal step embedding.

All layers are differentiable through the tape in ``tensor``; convolution and
its transpose share one kernel layout (out_channels, in_channels, k, k) so the
adjoint identity <conv(x), y> == <x, conv_t(y)> holds with the same kernel.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _as_tensor, custom_op, concat, matmul, mean, relu, \
    reshape, softmax, sqrt, square, transpose


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv2d_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wd, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, kh * kw * ci, ho * wo), dtype=x.dtype)
    idx = 0
    for u in range(kh):
        for v in range(kw):
            patch = x[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            cols[:, idx * ci:(idx + 1) * ci, :] = patch.reshape(n, ci, ho * wo)
            idx += 1
    # cols rows are ordered (u, v, c); flatten the kernel to match
    wf = w.transpose(2, 3, 1, 0).reshape(kh * kw * ci, o)
    out = np.einsum("nkp,ko->nop", cols, wf, optimize=True)
    return out.reshape(n, o, ho, wo)


def _conv2d_grad_x(dout: np.ndarray, w: np.ndarray, stride: int, padding: int,
                   x_spatial) -> np.ndarray:
    n, o, ho, wo = dout.shape
    _, ci, kh, kw = w.shape
    h, wd = x_spatial
    hp, wp = h + 2 * padding, wd + 2 * padding
    dx = np.zeros((n, ci, hp, wp), dtype=dout.dtype)
    for u in range(kh):
        for v in range(kw):
            contrib = np.einsum("noij,oc->ncij", dout, w[:, :, u, v],
                                optimize=True)
            dx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    if padding:
        dx = dx[:, :, padding:hp - padding, padding:wp - padding]
    return dx


def _conv2d_grad_w(x: np.ndarray, dout: np.ndarray, stride: int, padding: int,
                   w_shape) -> np.ndarray:
    n, c, h, wd = x.shape
    _, o, ho, wo = dout.shape
    ko, ci, kh, kw = w_shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    dw = np.zeros(w_shape, dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = x[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            dw[:, :, u, v] = np.einsum("ncij,noij->oc", patch, dout,
                                       optimize=True)
    return dw


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIkk kernels (odd extent)."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if len(x.shape) != 4 or len(kernels.shape) != 4:
        raise ValueError("conv2d: expected NCHW input and OIkk kernels, got "
                         f"input {x.shape} and kernels {kernels.shape}")
    if kernels.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: kernel spatial extent must be odd, got "
                         f"{kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape} do not match "
                         f"kernel shape {kernels.shape}")
    out = _conv2d_fwd(x.data, kernels.data, stride, padding)
    x_spatial = x.shape[2:]

    def bw(g):
        return (_conv2d_grad_x(g, kernels.data, stride, padding, x_spatial),
                _conv2d_grad_w(x.data, g, stride, padding, kernels.shape))

    return custom_op((x, kernels), out, bw)


def transpose_conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with identical kernels and geometry.

    Input channels equal the kernels' O axis; output channels its I axis.
    Output spatial extent is (n - 1) * stride + k - 2 * padding.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if len(x.shape) != 4 or len(kernels.shape) != 4:
        raise ValueError("transpose_conv2d: expected NCHW input and OIkk "
                         f"kernels, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[0]:
        raise ValueError(f"transpose_conv2d: input channels {x.shape} do not "
                         f"match kernel shape {kernels.shape}")
    k = kernels.shape[2]
    h_out = (x.shape[2] - 1) * stride + k - 2 * padding
    w_out = (x.shape[3] - 1) * stride + k - 2 * padding
    out = _conv2d_grad_x(x.data, kernels.data, stride, padding, (h_out, w_out))

    def bw(g):
        return (_conv2d_fwd(g, kernels.data, stride, padding),
                _conv2d_grad_w(g, x.data, stride, padding, kernels.shape))

    return custom_op((x, kernels), out, bw)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide by `size`."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: extents of {x.shape} not divisible by "
                         f"{size}")
    ho, wo = h // size, w // size
    windows = x.data.reshape(n, c, ho, size, wo, size)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo,
                                                          size * size)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return custom_op((x,), out, bw)


class BatchNormState:
    """Running statistics for one batch-norm layer (per-channel)."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, epsilon: float = 1e-5,
               training: bool = True) -> Tensor:
    """Per-channel normalization over the batch and spatial axes."""
    if epsilon <= 0:
        raise ValueError("batch_norm: epsilon must be > 0")
    x = _as_tensor(x)
    c = x.shape[1]
    axes = (0, 2, 3)
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(square(centered), axis=axes, keepdims=True)
        xhat = centered / sqrt(var + epsilon)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean \
            + m * mu.data.reshape(c)
        state.running_var = (1 - m) * state.running_var \
            + m * var.data.reshape(c)
    else:
        rm = state.running_mean.reshape(1, c, 1, 1)
        rv = state.running_var.reshape(1, c, 1, 1)
        xhat = (x - rm) * (1.0 / np.sqrt(rv + epsilon))
    g = reshape(_as_tensor(gamma), (1, c, 1, 1))
    b = reshape(_as_tensor(beta), (1, c, 1, 1))
    return g * xhat + b


def self_attention(x, wq, wk, wv, wo, return_weights: bool = False):
    """Single-head dot-product attention over flattened spatial positions.

    The attended value is projected by `wo` and added residually to the
    input, so zeroed projections leave the input untouched.  Attention
    weights are row-stochastic over source positions.
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    p = h * w
    flat = reshape(x, (n, c, p))
    q = matmul(wq, flat)
    k = matmul(wk, flat)
    v = matmul(wv, flat)
    scores = matmul(transpose(q, (0, 2, 1)), k) * (1.0 / np.sqrt(c))
    weights = softmax(scores, axis=-1)            # (n, p, p), rows sum to 1
    attended = matmul(v, transpose(weights, (0, 2, 1)))
    out = x + reshape(matmul(wo, attended), (n, c, h, w))
    if return_weights:
        return out, weights.data
    return out


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: x @ weight.T + bias."""
    out = matmul(x, transpose(_as_tensor(weight), (1, 0)))
    if bias is not None:
        out = out + bias
    return out


def sine_time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal position encoding of a step index.

    Entry 2i is sin(t / 10000^(2i/dim)) and entry 2i+1 the matching cosine,
    so t = 0 maps to alternating zeros and ones.
    """
    if dim % 2:
        raise ValueError(f"sine_time_embedding: dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    emb = np.empty(dim)
    emb[0::2] = np.sin(angles)
    emb[1::2] = np.cos(angles)
    return emb


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

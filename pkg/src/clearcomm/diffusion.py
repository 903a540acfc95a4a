"""Noise schedule, forward diffusion, reverse sampling, and the denoiser
training step.

Schedules are 1-indexed in the math and 0-indexed in storage: alpha[t - 1]
belongs to step t. Step variances are beta with the final step forced
deterministic (sigma for t = 1 is zero), so oracle inversion tests close
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, ComplexSequence, apply_channel
from .csi import CsiEstimate, equalize
from .optim import ParamSet, adam_step, backward
from .tensor import Tensor, no_grad
from .unet import Denoiser, unet_predict

T_START_CLEAN = 1e-9    # noise-to-signal at/below this skips denoising


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray       # per-step, strictly decreasing, in (0, 1)
    alpha_bar: np.ndarray   # running products
    sigma: np.ndarray       # reverse-step noise scale, sigma[0] = 0

    @property
    def T(self) -> int:
        return len(self.alpha)


def make_schedule(T: int, kind: str = "linear",
                  alpha_bar_T_target: float = 1e-4) -> NoiseSchedule:
    """Linear beta ramp from 1e-4 with the endpoint chosen by bisection so
    the cumulative product just reaches the target."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind}")
    beta_1 = 1e-4
    hi = 1.0 - 1e-9

    def abar_T(beta_T):
        return np.prod(1.0 - np.linspace(beta_1, beta_T, T))

    floor = abar_T(hi)
    if alpha_bar_T_target < floor:
        raise ValueError(
            f"target {alpha_bar_T_target:g} unreachable; achievable bound "
            f"is {floor:g} for T = {T}")
    if abar_T(beta_1 * (1 + 1e-6)) <= alpha_bar_T_target:
        raise ValueError(
            f"target {alpha_bar_T_target:g} already met by a flat schedule; "
            "alpha would not decrease")
    lo = beta_1
    b_hi = hi
    for _ in range(200):
        mid = 0.5 * (lo + b_hi)
        if abar_T(mid) <= alpha_bar_T_target:
            b_hi = mid
        else:
            lo = mid
    beta = np.linspace(beta_1, b_hi, T)
    alpha = 1.0 - beta
    sigma = np.sqrt(beta)
    sigma[0] = 0.0
    return NoiseSchedule(alpha, np.cumprod(alpha), sigma)


def _fade_features(x0: np.ndarray, h: ChannelRealization) -> np.ndarray:
    """Channel convolution on the feature grid: each image's planes pack
    into one complex stream (plane 2i real, 2i+1 imaginary), fade through h
    without additive noise, and scatter back."""
    shadow = ChannelRealization(h.paths, h.phase_noise, float("inf"),
                                h.profile)
    out = np.empty_like(x0)
    nb, c = x0.shape[0], x0.shape[1]
    for i in range(nb):
        z = (x0[i, 0::2] + 1j * x0[i, 1::2]).ravel()
        y = apply_channel(ComplexSequence(z), shadow, seed=0).samples
        out[i, 0::2] = y.real.reshape(c // 2, *x0.shape[2:])
        out[i, 1::2] = y.imag.reshape(c // 2, *x0.shape[2:])
    return out


def forward_diffuse(x0, h: ChannelRealization | None, sched: NoiseSchedule,
                    t: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form jump to step t: sqrt(abar_t) * C(x0) + sqrt(1 - abar_t) * eps.

    C is the identity without a channel and the feature-grid fade with one.
    Returns (x_t, eps); eps is the training target.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t = {t} outside schedule range 1..{sched.T}")
    x0 = np.asarray(x0, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    y = x0 if h is None else _fade_features(x0, h)
    ab = sched.alpha_bar[t - 1]
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps, eps


def diffuse_sequence(x0, h: ChannelRealization | None, sched: NoiseSchedule,
                     seed) -> list[np.ndarray]:
    """Per-step recursion x_t = sqrt(alpha_t) x_{t-1} + sqrt(1-alpha_t) eps_t
    for t = 1..T; marginals match the closed form of forward_diffuse."""
    x0 = np.asarray(x0, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    x = x0 if h is None else _fade_features(x0, h)
    out = []
    for t in range(1, sched.T + 1):
        a = sched.alpha[t - 1]
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * rng.standard_normal(x.shape)
        out.append(x)
    return out


def _predict(den, x_t, t, cond):
    if isinstance(den, Denoiser):
        return unet_predict(x_t, t, cond, den)
    return den(x_t, t, cond)    # oracle / test double


def reverse_step(x_t, t: int, den, sched: NoiseSchedule, cond, seed,
                 sigma_scale: float = 1.0) -> np.ndarray:
    """One posterior step t -> t-1 through the predicted-clean-signal form.

    den is a Denoiser or any callable (x_t, t, cond) -> eps_hat.
    sigma_scale = 0 makes the whole trajectory deterministic.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t = {t} outside schedule range 1..{sched.T}")
    x_t = np.asarray(x_t, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    with no_grad():
        eps_hat = _predict(den, x_t, t, cond)
    if isinstance(eps_hat, Tensor):
        eps_hat = eps_hat.data
    ab_t = sched.alpha_bar[t - 1]
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if t == 1:
        return x0_hat
    ab_prev = sched.alpha_bar[t - 2]
    a_t = sched.alpha[t - 1]
    beta_t = 1.0 - a_t
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    c1 = np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_hat + c1 * x_t
    s = sigma_scale * sched.sigma[t - 1]
    if s == 0.0:
        return mean
    return mean + s * rng.standard_normal(x_t.shape)


def pick_t_start(sched: NoiseSchedule, snr_db: float) -> int:
    """Smallest step whose schedule noise-to-signal ratio dominates the
    estimated channel noise; 0 when the channel is effectively clean, T when
    even the full schedule cannot dominate."""
    s_lin = 10.0 ** (-snr_db / 10.0)
    if s_lin <= T_START_CLEAN:
        return 0
    ratio = (1.0 - sched.alpha_bar) / sched.alpha_bar
    hits = np.nonzero(ratio >= s_lin)[0]
    return int(hits[0]) + 1 if len(hits) else sched.T


def train_step(x0, h: ChannelRealization | None, sched: NoiseSchedule,
               den, lr: float, seed, cond=(0.0, 0.0, 0.0)) -> float:
    """One denoiser update: per-sample uniform t, closed-form noising, L2
    between predicted and injected noise, Adam on the denoiser subset.

    A callable den (oracle/test double) only measures the loss; no update.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    n = x0.shape[0]
    ts = rng.integers(1, sched.T + 1, size=n)
    y = x0 if h is None else _fade_features(x0, h)
    ab = sched.alpha_bar[ts - 1].reshape((n,) + (1,) * (x0.ndim - 1))
    eps = rng.standard_normal(x0.shape)
    x_t = np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps
    if not isinstance(den, Denoiser):
        eps_hat = den(x_t, ts, cond)
        if isinstance(eps_hat, Tensor):
            eps_hat = eps_hat.data
        return float(np.mean((eps_hat - eps) ** 2))
    den.pset.zero_grad()
    eps_hat = unet_predict(x_t, ts, cond, den)
    diff = eps_hat - Tensor(eps)
    loss = (diff * diff).mean()
    grads = backward(loss, den.pset)
    mine = {k: g for k, g in grads.items()
            if k.startswith(den.prefix + ".")}
    adam_step(den.pset, mine, lr)
    return float(loss.data)


def _rescale_to_step(eq: np.ndarray, sched: NoiseSchedule, t_start: int,
                     snr_db: float, rng) -> np.ndarray:
    # equalized features look like x0 plus residual noise of power
    # 10^(-snr/10); scale to sqrt(abar) and top up with fresh noise so the
    # marginal matches x_{t_start}
    ab = sched.alpha_bar[t_start - 1]
    have = ab * 10.0 ** (-snr_db / 10.0)
    need = max((1.0 - ab) - have, 0.0)
    return np.sqrt(ab) * eq + np.sqrt(need) * rng.standard_normal(eq.shape)


def sample(y_r, csi: CsiEstimate, den, sched: NoiseSchedule, t_start: int,
           mask: np.ndarray, cond, seed, offset: int = 0,
           mode: str = "equalize", sigma_scale: float = 1.0) -> np.ndarray:
    """Denoise received features: equalize, unpack onto the feature grid,
    match the step-t_start marginal, then run the reverse chain down to 1.

    y_r: one ComplexSequence per image (a bare sequence is treated as a
    batch of one). mask: the transmitted selection mask (N, C, H, W).
    mode "literal" instead re-applies the estimated channel inside the loop
    as the sampling algorithm's channel-influence line writes it.
    """
    if mode not in ("equalize", "literal"):
        raise ValueError(f"unknown sample mode: {mode}")
    if not 0 <= t_start <= sched.T:
        raise ValueError(
            f"t_start = {t_start} outside schedule range 0..{sched.T}")
    from .codec import unpack_complex
    if isinstance(y_r, ComplexSequence):
        y_r = [y_r]
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    eqd = [equalize(y, csi, offset=offset).samples for y in y_r]
    x = unpack_complex(eqd, mask)
    if t_start == 0:
        return x
    x = _rescale_to_step(x, sched, t_start, csi.est_snr_db, rng)
    for t in range(t_start, 0, -1):
        x = reverse_step(x, t, den, sched, cond, rng,
                         sigma_scale=sigma_scale)
        if mode == "literal" and t > 1:
            # the channel-influence line: re-fade the running signal and add
            # the step noise once more
            taps = np.zeros(int(csi.est_delays.max()) + 1, dtype=complex)
            np.add.at(taps, csi.est_delays.astype(int), csi.est_gains)
            nb, c = x.shape[0], x.shape[1]
            for i in range(nb):
                z = (x[i, 0::2] + 1j * x[i, 1::2]).ravel()
                z = np.convolve(z, taps)[:len(z)]
                x[i, 0::2] = z.real.reshape(c // 2, *x.shape[2:])
                x[i, 1::2] = z.imag.reshape(c // 2, *x.shape[2:])
            x = x + sched.sigma[t - 1] * sigma_scale \
                * rng.standard_normal(x.shape)
    return x

"""Discrete-time complex-baseband channel: multipath fading with per-path
Doppler rotation, Wiener oscillator phase noise, and AWGN.

Time variation lives in the realization (gain trajectories and a phase-noise
walk over a fixed horizon); `apply_channel` can place a signal block anywhere
on that horizon via `offset`, so a pilot and its data block can share one
physical realization.  Delay memory does not cross block boundaries:
out-of-range input indices read as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

C_LIGHT = 3.0e8

PROFILES = ("awgn", "rayleigh", "time_varying")


@dataclass
class ComplexSequence:
    """Finite complex baseband signal on a uniform sample grid."""

    samples: np.ndarray
    sample_interval: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1:
            raise ValueError("ComplexSequence samples must be 1-D, got shape "
                             f"{self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise FloatingPointError("non-finite samples")
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be > 0")

    def __len__(self):
        return self.samples.size

    def power(self) -> float:
        """Mean squared magnitude."""
        return float(np.mean(np.abs(self.samples) ** 2))


@dataclass
class PathSpec:
    """One propagation path: complex base gain, integer delay, normalized
    Doppler (cycles per sample), and a phase offset for the rotation."""

    base_gain: complex
    delay_samples: int
    doppler: float = 0.0
    initial_phase: float = 0.0

    def __post_init__(self):
        if self.delay_samples < 0:
            raise ValueError("delay_samples must be non-negative")

    def gain_at(self, k) -> np.ndarray:
        """Gain trajectory at sample indices k (Doppler rotation included)."""
        k = np.asarray(k)
        return self.base_gain * np.exp(
            1j * (2.0 * np.pi * self.doppler * k + self.initial_phase))


@dataclass
class ChannelRealization:
    """Sampled paths plus a phase-noise trajectory over a fixed horizon."""

    paths: list
    phase_noise: np.ndarray      # (n,) common walk, or (L, n) per-path
    snr_db: float
    profile: str = "time_varying"

    def __post_init__(self):
        self.phase_noise = np.asarray(self.phase_noise, dtype=np.float64)
        if not self.paths:
            raise ValueError("realization needs at least one path")
        if self.phase_noise.ndim == 2 and \
                self.phase_noise.shape[0] != len(self.paths):
            raise ValueError("per-path phase noise row count must equal the "
                             "path count")

    @property
    def L(self) -> int:
        return len(self.paths)

    @property
    def length(self) -> int:
        return self.phase_noise.shape[-1]

    @property
    def max_delay(self) -> int:
        return max(p.delay_samples for p in self.paths)

    def path_phase(self, i: int) -> np.ndarray:
        if self.phase_noise.ndim == 2:
            return self.phase_noise[i]
        return self.phase_noise


@dataclass
class ChannelConfig:
    """Knobs for realize_channel.

    doppler_scale is the maximum normalized Doppler in cycles/sample (drawn
    uniformly per path); phase_noise_scale is the Wiener step deviation in
    radians.  profile `awgn` collapses to a unit identity path, `rayleigh`
    keeps multipath but freezes the time variation.
    """

    profile: str = "time_varying"
    L: int = 8
    max_delay_spread_samples: int = 4
    doppler_scale: float = 0.0
    phase_noise_scale: float = 0.0
    snr_db: float = 20.0
    per_path_phase_noise: bool = False

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one "
                             f"of {PROFILES}")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.max_delay_spread_samples < 0:
            raise ValueError("max_delay_spread_samples must be >= 0")
        if self.doppler_scale < 0 or self.phase_noise_scale < 0:
            raise ValueError("doppler_scale and phase_noise_scale must be "
                             ">= 0")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite in a config; build a "
                             "noiseless realization directly if needed")
        if self.profile == "awgn":
            self.L = 1
            self.max_delay_spread_samples = 0
            self.doppler_scale = 0.0
            self.phase_noise_scale = 0.0
        elif self.profile == "rayleigh":
            self.doppler_scale = 0.0
            self.phase_noise_scale = 0.0


def doppler_shift(v: float, fc: float, theta: float) -> float:
    """Doppler frequency in Hz for speed v, carrier fc, approach angle theta."""
    if not 0 <= v < C_LIGHT:
        raise ValueError(f"speed must satisfy 0 <= v < c, got {v}")
    return (v / C_LIGHT) * fc * math.cos(theta)


def phase_noise_trajectory(pn_scale: float, n: int, seed) -> np.ndarray:
    """Wiener phase walk: phi(0) = 0, increments i.i.d. N(0, pn_scale^2)."""
    if pn_scale < 0:
        raise ValueError("pn_scale must be >= 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    phi = np.zeros(n)
    if pn_scale > 0 and n > 1:
        rng = seed if isinstance(seed, np.random.Generator) \
            else np.random.default_rng(seed)
        phi[1:] = np.cumsum(pn_scale * rng.standard_normal(n - 1))
    return phi


def identity_realization(n: int, snr_db: float = float("inf")
                         ) -> ChannelRealization:
    """Single unit path, no time variation; snr_db=inf means no noise."""
    return ChannelRealization([PathSpec(1.0 + 0.0j, 0)], np.zeros(n), snr_db,
                              profile="awgn")


def realize_channel(config: ChannelConfig, n: int, seed) -> ChannelRealization:
    """Draw one channel realization over an n-sample horizon.

    Path gains are i.i.d. complex Gaussian scaled by 1/sqrt(L), so the
    ensemble satisfies sum_i E|gain_i|^2 = 1 and the aggregate gain stays
    complex Gaussian (Rayleigh envelope) for every L.  Per-path Doppler is
    uniform on [-Ds, Ds] cycles/sample; delays are uniform on the grid.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if config.profile == "awgn":
        return ChannelRealization([PathSpec(1.0 + 0.0j, 0)], np.zeros(n),
                                  config.snr_db, profile="awgn")
    rng = np.random.default_rng(seed)
    L = config.L
    gains = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) \
        / np.sqrt(2.0 * L)
    delays = rng.integers(0, config.max_delay_spread_samples + 1, size=L)
    ds = config.doppler_scale
    dopplers = rng.uniform(-ds, ds, size=L) if ds > 0 else np.zeros(L)
    if config.per_path_phase_noise:
        phase = np.stack([
            phase_noise_trajectory(config.phase_noise_scale, n, rng)
            for _ in range(L)])
    else:
        phase = phase_noise_trajectory(config.phase_noise_scale, n, rng)
    paths = [PathSpec(complex(gains[i]), int(delays[i]), float(dopplers[i]))
             for i in range(L)]
    return ChannelRealization(paths, phase, config.snr_db, config.profile)


def _awgn(shape, snr_db: float, rng) -> np.ndarray:
    if np.isinf(snr_db) and snr_db > 0:
        return np.zeros(shape, dtype=np.complex128)
    var = 10.0 ** (-snr_db / 10.0)
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape)
                    + 1j * rng.standard_normal(shape))


def _fade(s: np.ndarray, ch: ChannelRealization, offset: int) -> np.ndarray:
    n = s.size
    k = np.arange(offset, offset + n)
    y = np.zeros(n, dtype=np.complex128)
    for i, p in enumerate(ch.paths):
        rot = p.gain_at(k) * np.exp(1j * ch.path_phase(i)[k])
        tau = p.delay_samples
        if tau >= n:
            continue
        if tau:
            y[tau:] += rot[tau:] * s[:n - tau]
        else:
            y += rot * s
    return y


def apply_channel(x: ComplexSequence, ch: ChannelRealization, seed,
                  offset: int = 0, cyclic_prefix: int = 0) -> ComplexSequence:
    """Pass x through the realization starting at horizon position `offset`.

    y(k) = sum_i gain_i(offset+k) * e^{j phi(offset+k)} * x(k - tau_i) + n(k)
    with n complex Gaussian at the variance implied by snr_db relative to
    unit signal power.  The awgn profile short-circuits the path math.

    cyclic_prefix > 0 prepends the block's own tail before the path math and
    drops it afterwards, turning the delay spread into a circular shift so a
    frequency-domain equalizer sees no block-edge distortion.  The returned
    block then sits at horizon position offset + cyclic_prefix.
    """
    n = len(x)
    if cyclic_prefix < 0 or cyclic_prefix > n:
        raise ValueError("cyclic_prefix must lie in [0, block length]")
    if offset < 0 or offset + n + cyclic_prefix > ch.length:
        raise ValueError(f"block [{offset}, {offset + n + cyclic_prefix}) "
                         f"does not fit the realization horizon of "
                         f"{ch.length} samples")
    s = x.samples
    if ch.profile == "awgn":
        y = s.copy()
    elif cyclic_prefix:
        ext = np.concatenate([s[n - cyclic_prefix:], s])
        y = _fade(ext, ch, offset)[cyclic_prefix:]
    else:
        y = _fade(s, ch, offset)
    rng = np.random.default_rng(seed)
    y = y + _awgn(n, ch.snr_db, rng)
    return ComplexSequence(y, x.sample_interval)


def transfer_function(ch: ChannelRealization, t: int, n_freq: int
                      ) -> np.ndarray:
    """DFT of the instantaneous impulse response at horizon position t."""
    if n_freq < ch.max_delay + 1:
        raise ValueError(f"n_freq={n_freq} cannot hold delays up to "
                         f"{ch.max_delay}")
    grid = np.arange(n_freq)
    H = np.zeros(n_freq, dtype=np.complex128)
    for i, p in enumerate(ch.paths):
        g = p.gain_at(t) * np.exp(1j * ch.path_phase(i)[t])
        H += g * np.exp(-2j * np.pi * p.delay_samples * grid / n_freq)
    return H

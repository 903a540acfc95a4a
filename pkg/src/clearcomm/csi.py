"""Pilot-based channel estimation and the receiver-side adaptation it feeds.

The estimator is least squares over a delay-lag window: the tiled pilot forms
a Toeplitz design matrix, one tap per lag.  Residual power yields an
effective SNR (time variation a static model cannot explain lands in the
residual, which is exactly what the denoiser conditioning wants).  Repeated
pilot blocks expose the common rotation: the inter-block drift of the tap
estimates gives a Doppler estimate, and the jitter left after removing that
linear drift gives a phase-noise rate.  The drift estimate aliases once the
rotation exceeds half a cycle per block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

from .channel import ChannelRealization, ComplexSequence

EST_SNR_CAP_DB = 100.0
EST_SNR_FLOOR_DB = -50.0

# conditioning normalization: snr mapped from [-5, 30] dB, Doppler by the
# largest grid value 0.5 cycles/sample, phase rate by the largest 0.2 rad
COND_SNR_LO = -5.0
COND_SNR_HI = 30.0
COND_DS_MAX = 0.5
COND_PN_MAX = 0.2


@dataclass
class PilotBlock:
    """Known constant-modulus block, optionally repeated back to back."""

    symbols: ComplexSequence
    repetitions: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not np.allclose(np.abs(self.symbols.samples), 1.0, atol=1e-9):
            raise ValueError("pilot symbols must have unit magnitude")

    @property
    def block_length(self) -> int:
        return len(self.symbols)

    def signal(self) -> ComplexSequence:
        """The full transmitted pilot (blocks tiled in time)."""
        return ComplexSequence(np.tile(self.symbols.samples,
                                       self.repetitions),
                               self.symbols.sample_interval)


@dataclass
class CsiEstimate:
    """Least-squares channel knowledge: one complex tap per delay lag plus
    common-rotation and effective-SNR estimates."""

    est_gains: np.ndarray        # complex tap per lag
    est_delays: np.ndarray       # the lag grid 0..max_delay
    est_doppler: float           # common rotation, cycles/sample
    est_phase_rate: float        # residual phase jitter, radians/sample
    est_snr_db: float

    def __post_init__(self):
        self.est_gains = np.asarray(self.est_gains, dtype=np.complex128)
        self.est_delays = np.asarray(self.est_delays, dtype=np.int64)
        if self.est_gains.shape != self.est_delays.shape:
            raise ValueError("gain and delay grids must align")
        if not np.isfinite(self.est_snr_db):
            raise ValueError("est_snr_db must be finite")
        if not np.all(np.isfinite(self.est_gains.view(np.float64))):
            raise FloatingPointError("non-finite tap estimate")


@dataclass
class AdaptedParams:
    """Receiver-side model: combined impulse response and the normalized
    conditioning vector handed to the denoiser."""

    impulse_response: np.ndarray
    conditioning: np.ndarray

    def __post_init__(self):
        self.conditioning = np.asarray(self.conditioning, dtype=np.float64)
        if self.conditioning.min() < 0.0 or self.conditioning.max() > 1.0:
            raise ValueError("conditioning entries must lie in [0, 1]")


def make_pilot(length: int, seed, repetitions: int = 1) -> PilotBlock:
    """Constant-modulus pseudo-random phase pilot, unit power by construction."""
    if length < 8:
        raise ValueError(f"pilot length must be >= 8, got {length}")
    rng = np.random.default_rng(seed)
    sym = np.exp(2j * np.pi * rng.uniform(size=length))
    return PilotBlock(ComplexSequence(sym), repetitions)


def _block_taps(pilot_full: np.ndarray, received: np.ndarray, m: int,
                reps: int, n_lags: int):
    """Per-repetition least-squares taps over the lag window."""
    design = toeplitz(pilot_full, np.zeros(n_lags))
    taps = []
    for b in range(reps):
        rows = slice(b * m, (b + 1) * m)
        sol, _, rank, _ = np.linalg.lstsq(design[rows], received[rows],
                                          rcond=None)
        if rank < n_lags:
            raise ValueError("degenerate pilot: least-squares system is "
                             "rank-deficient over the lag window")
        taps.append(sol)
    return design, np.stack(taps)


def estimate_csi(pilot: PilotBlock, received: ComplexSequence,
                 max_delay: int) -> CsiEstimate:
    """Estimate taps on lags 0..max_delay from the received pilot."""
    if max_delay < 0:
        raise ValueError("max_delay must be >= 0")
    m, reps = pilot.block_length, pilot.repetitions
    if m < max_delay + 1:
        raise ValueError(f"pilot block of {m} symbols cannot resolve delays "
                         f"up to {max_delay}")
    y = received.samples
    if y.size != m * reps:
        raise ValueError(f"received length {y.size} does not match pilot "
                         f"signal length {m * reps}")
    n_lags = max_delay + 1
    pilot_full = pilot.signal().samples
    design, taps = _block_taps(pilot_full, y, m, reps, n_lags)

    est_doppler = 0.0
    est_phase_rate = 0.0
    if reps >= 2:
        # consecutive-block drift of the tap vector = common rotation; the
        # first block's estimate carries a start-of-signal boundary bias
        # (leading design rows read zeros), so skip its increment when a
        # later one is available
        deltas = np.angle(np.array([np.vdot(taps[b], taps[b + 1])
                                    for b in range(reps - 1)]))
        usable = deltas[1:] if reps >= 3 else deltas
        est_doppler = float(np.mean(usable)) / (2.0 * np.pi * m)
        if usable.size >= 2:
            # each increment is drift + Wiener displacement over m steps;
            # differencing cancels the drift, leaving variance 2 m Pn^2
            est_phase_rate = float(np.std(np.diff(usable))
                                   / np.sqrt(2.0 * m))

    # effective SNR from the static-model residual over the whole pilot
    h = taps[0]
    if reps >= 2:
        # derotate each block estimate before averaging the taps
        rot = np.exp(-2j * np.pi * est_doppler * np.arange(reps) * m)
        h = (taps * rot[:, None]).mean(axis=0)
    explained = design @ h
    if reps >= 2 and est_doppler != 0.0:
        explained = explained * np.exp(
            2j * np.pi * est_doppler * np.arange(m * reps))
    resid_power = float(np.mean(np.abs(y - explained) ** 2))
    signal_power = float(np.mean(np.abs(explained) ** 2))
    if resid_power <= signal_power * 10.0 ** (-EST_SNR_CAP_DB / 10.0):
        snr_db = EST_SNR_CAP_DB
    elif signal_power == 0.0:
        snr_db = EST_SNR_FLOOR_DB
    else:
        snr_db = 10.0 * np.log10(signal_power / resid_power)
        snr_db = float(np.clip(snr_db, EST_SNR_FLOOR_DB, EST_SNR_CAP_DB))
    return CsiEstimate(h, np.arange(n_lags), est_doppler, est_phase_rate,
                       snr_db)


def conditioning_vector(snr_db: float, doppler: float,
                        phase_rate: float) -> np.ndarray:
    """Map (effective SNR, Doppler, phase rate) into [0, 1]^3."""
    return np.array([
        np.clip((snr_db - COND_SNR_LO) / (COND_SNR_HI - COND_SNR_LO), 0, 1),
        np.clip(abs(doppler) / COND_DS_MAX, 0, 1),
        np.clip(abs(phase_rate) / COND_PN_MAX, 0, 1),
    ])


def update_parameters(csi: CsiEstimate) -> AdaptedParams:
    """Combine the estimate into an impulse-response model and the
    normalized conditioning vector (parameters start from zero and are
    overwritten by the estimates)."""
    impulse = np.zeros(int(csi.est_delays.max()) + 1, dtype=np.complex128)
    np.add.at(impulse, csi.est_delays, csi.est_gains)
    cond = conditioning_vector(csi.est_snr_db, csi.est_doppler,
                               csi.est_phase_rate)
    return AdaptedParams(impulse, cond)


def equalizer_weights(csi: CsiEstimate, n: int) -> np.ndarray:
    """Per-bin MMSE weights conj(H) / (|H|^2 + 1/snr) for an n-point grid."""
    if n < int(csi.est_delays.max()) + 1:
        raise ValueError(f"grid of {n} samples cannot hold delays up to "
                         f"{int(csi.est_delays.max())}")
    h = np.zeros(n, dtype=np.complex128)
    np.add.at(h, csi.est_delays, csi.est_gains)
    H = np.fft.fft(h)
    inv_snr = 10.0 ** (-csi.est_snr_db / 10.0)
    return np.conj(H) / (np.abs(H) ** 2 + inv_snr)


def equalize(received: ComplexSequence, csi: CsiEstimate,
             offset: int = 0) -> ComplexSequence:
    """MMSE frequency-domain equalization with common-rotation removal.

    `offset` is the block's position on the realization horizon so the
    derotation phase lines up with where the estimate was made.
    """
    y = received.samples
    n = y.size
    if csi.est_doppler != 0.0:
        k = np.arange(offset, offset + n)
        y = y * np.exp(-2j * np.pi * csi.est_doppler * k)
    w = equalizer_weights(csi, n)
    out = np.fft.ifft(w * np.fft.fft(y))
    return ComplexSequence(out, received.sample_interval)

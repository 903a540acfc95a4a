"""End-to-end training and evaluation: the differentiable channel crossing,
the joint optimization loop, early stopping, and PSNR grids.

The transmit op is the only place gradients cross the complex-valued
channel. Fading, derotation, and frequency-domain equalization are all
complex-linear in the sent symbols, so the backward pass applies the
conjugate-coefficient adjoint of each stage in reverse; the additive noise
is seed-fixed and contributes nothing.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelConfig, ComplexSequence, apply_channel, realize_channel
from .codec import (CodecConfig, CodecParams, SemanticFeatures, decode,
                    encode, init_codec_params, normalize_power, rate_select)
from .csi import (COND_SNR_HI, COND_SNR_LO, conditioning_vector, equalize,
                  equalizer_weights, estimate_csi, make_pilot,
                  update_parameters)
from .diffusion import (NoiseSchedule, make_schedule, pick_t_start,
                        train_step)
from .optim import ParamSet, adam_step, backward, clip_grad_norm
from .tensor import Tensor, clamp, custom_op, no_grad
from .unet import Denoiser, DenoiserConfig, init_denoiser, unet_predict

PSNR_CAP_DB = 100.0

# normalized features carry unit average power per image, so honest clean
# estimates live well inside this bound
CHAIN_X0_CLIP = 8.0

# evaluation rows of the experiment protocol: name, profile, doppler scale,
# phase-noise scale
CHANNEL_CONDITIONS = (
    ("awgn", "awgn", 0.0, 0.0),
    ("rayleigh", "rayleigh", 0.0, 0.0),
    ("tv-low", "time_varying", 0.01, 0.01),
    ("tv-med", "time_varying", 0.05, 0.05),
    ("tv-high", "time_varying", 0.5, 0.2),
)


def mse_loss(s_hat, s) -> Tensor:
    """Mean squared difference over every element (graph-building)."""
    a = s_hat if isinstance(s_hat, Tensor) else Tensor(np.asarray(s_hat, dtype=np.float64))
    b = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def psnr(s_hat, s, max_val: float = 1.0) -> float:
    """10 log10(max^2 / mse), capped at 100 dB (identical inputs hit the cap)."""
    if max_val <= 0:
        raise ValueError("max_val must be > 0")
    mse = float(np.mean((np.asarray(s_hat, dtype=np.float64)
                         - np.asarray(s, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(max_val ** 2 / mse), PSNR_CAP_DB)


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    snr_train: float = 15.0
    snr_spread_db: float = 0.0          # per-batch snr jitter half-width
    grad_clip_norm: float = 0.0         # global-norm gradient clip; 0 = off
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    compression_rate: float = 0.6
    addm_enabled: bool = True
    addm_pretrain_epochs: int = 0       # staged mode; 0 keeps pure joint
    denoise_steps: int = 50             # schedule length for the desk loops

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.addm_pretrain_epochs < 0:
            raise ValueError("addm_pretrain_epochs must be >= 0")
        if not np.isfinite(self.snr_spread_db) or self.snr_spread_db < 0:
            raise ValueError("snr_spread_db must be finite and >= 0")
        if not np.isfinite(self.grad_clip_norm) or self.grad_clip_norm < 0:
            raise ValueError("grad_clip_norm must be finite and >= 0")


@dataclass
class EvalResult:
    rows: list            # dicts with the grid cell and its mean metrics
    trials: int
    seed: int


class ClearModel:
    """One experiment's trainables: shared ParamSet, codec, denoiser, and
    the noise schedule they were trained against."""

    __slots__ = ("codec_cfg", "cp", "den", "sched")

    def __init__(self, codec_cfg: CodecConfig, cp: CodecParams,
                 den: Denoiser, sched: NoiseSchedule):
        self.codec_cfg = codec_cfg
        self.cp = cp
        self.den = den
        self.sched = sched

    @property
    def pset(self) -> ParamSet:
        return self.cp.pset


def init_model(codec_cfg: CodecConfig, seed: int, denoiser_base: int = 16,
               denoiser_depth: int = 2, schedule_T: int = 50,
               schedule_target: float = 1e-3) -> ClearModel:
    rng = np.random.default_rng(seed)
    pset = ParamSet()
    cp = init_codec_params(codec_cfg, rng, pset)
    c, h, w = codec_cfg.feature_shape()
    depth = denoiser_depth
    while h % 2 ** depth or w % 2 ** depth:
        depth -= 1              # clamp to what the feature grid divides
    den = init_denoiser(DenoiserConfig(channels=c, base=denoiser_base,
                                       depth=max(depth, 1)), rng, pset)
    sched = make_schedule(schedule_T, alpha_bar_T_target=schedule_target)
    return ClearModel(codec_cfg, cp, den, sched)


# -- channel crossing ---------------------------------------------------------

def _path_rotations(ch, delays, abs_idx):
    rots = []
    for i, p in enumerate(ch.paths):
        rots.append(p.gain_at(abs_idx) * np.exp(1j * ch.path_phase(i)[abs_idx]))
    return rots


def _fade_adjoint(v, rots, delays):
    out = np.zeros_like(v)
    for rot, tau in zip(rots, delays):
        out += np.roll(np.conj(rot) * v, -tau)
    return out


def transmit(features: SemanticFeatures, ccfg: ChannelConfig, seed):
    """Send each image's active symbols through its own fresh channel
    realization with a leading pilot, estimate CSI, equalize, and scatter
    back onto the feature grid.

    Returns (received features Tensor, list of CsiEstimate, conditioning
    matrix (N, 3)). Differentiable in the features via the hand adjoint.
    """
    x = features.x0
    mask = features.mask
    nb, c = x.shape[0], x.shape[1]
    spatial = x.shape[2:]
    pair_mask = mask[:, 0::2]
    n_sym = int(pair_mask[0].sum())
    if any(int(pm.sum()) != n_sym for pm in pair_mask):
        raise ValueError("images carry unequal active-symbol counts")
    root = np.random.SeedSequence(seed)
    per_image = root.spawn(nb)
    ncp = 0 if ccfg.profile == "awgn" else min(
        ccfg.max_delay_spread_samples, n_sym)
    plen, reps = _pilot_shape(ccfg, n_sym)
    pilot = make_pilot(plen, seed=int(root.generate_state(1)[0] >> 1),
                       repetitions=reps)
    p_total = plen * reps
    data_off = p_total + ncp
    horizon = data_off + n_sym + ncp

    rx_grid = np.zeros_like(x.data)
    csis, conds = [], np.zeros((nb, 3))
    adj = []            # per image: (rots, delays, eq_weights, derot)
    for i in range(nb):
        seeds = per_image[i].generate_state(3)
        ch = realize_channel(ccfg, horizon, int(seeds[0] >> 1))
        rx_p = apply_channel(pilot.signal(), ch, int(seeds[1] >> 1))
        csi = estimate_csi(pilot, rx_p, ccfg.max_delay_spread_samples)
        z = (x.data[i, 0::2] + 1j * x.data[i, 1::2]).ravel()[pair_mask[i].ravel()]
        rx = apply_channel(ComplexSequence(z), ch, int(seeds[2] >> 1),
                           offset=p_total, cyclic_prefix=ncp)
        eq = equalize(rx, csi, offset=data_off).samples
        re = rx_grid[i, 0::2]
        im = rx_grid[i, 1::2]
        re[pair_mask[i]] = eq.real
        im[pair_mask[i]] = eq.imag
        rx_grid[i, 0::2] = re
        rx_grid[i, 1::2] = im
        csis.append(csi)
        conds[i] = update_parameters(csi).conditioning
        abs_idx = np.arange(data_off, data_off + n_sym)
        if ccfg.profile == "awgn":
            rots, delays = None, None
        else:
            delays = [p.delay_samples for p in ch.paths]
            rots = _path_rotations(ch, delays, abs_idx)
        w = equalizer_weights(csi, n_sym)
        derot = np.exp(-2j * np.pi * csi.est_doppler * abs_idx) \
            if csi.est_doppler != 0.0 else None
        adj.append((rots, delays, w, derot))

    def bw(g):
        dx = np.zeros_like(x.data)
        for i in range(nb):
            rots, delays, w, derot = adj[i]
            dz = (g[i, 0::2] + 1j * g[i, 1::2]).ravel()[pair_mask[i].ravel()]
            # adjoint of ifft(w * fft(derot * y))
            v = np.fft.ifft(np.conj(w) * np.fft.fft(dz))
            if derot is not None:
                v = np.conj(derot) * v
            if rots is not None:
                v = _fade_adjoint(v, rots, delays)
            re = dx[i, 0::2]
            im = dx[i, 1::2]
            re[pair_mask[i]] = v.real
            im[pair_mask[i]] = v.imag
            dx[i, 0::2] = re
            dx[i, 1::2] = im
        return (dx,)

    out = custom_op((x,), rx_grid, bw)
    return out, csis, conds


def _pilot_shape(ccfg: ChannelConfig, n_sym: int):
    # pilot must resolve the delay spread and, for drifting channels, carry
    # enough repetitions to see block-to-block rotation
    plen = max(16, 2 * (ccfg.max_delay_spread_samples + 1))
    reps = 4 if (ccfg.doppler_scale or ccfg.phase_noise_scale) else 2
    return plen, reps


def denoise_chain(x_init: Tensor, t_start: int, den: Denoiser,
                  sched: NoiseSchedule, cond, rng,
                  sigma_scale: float = 1.0, clip_x0=None) -> Tensor:
    """Graph-building reverse chain from t_start down to 1 (the
    differentiable counterpart of sampling for joint training).

    clip_x0 bounds the per-step clean estimate; without it a miscalibrated
    predictor feeds back on itself and a deep chain can blow up by orders
    of magnitude in a dozen steps."""
    x = x_init
    for t in range(t_start, 0, -1):
        eps_hat = unet_predict(x, t, cond, den)
        ab = sched.alpha_bar[t - 1]
        x0_hat = (x - eps_hat * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
        if clip_x0 is not None:
            x0_hat = clamp(x0_hat, -clip_x0, clip_x0)
        if t == 1:
            return x0_hat
        ab_prev = sched.alpha_bar[t - 2]
        a_t = sched.alpha[t - 1]
        c0 = np.sqrt(ab_prev) * (1.0 - a_t) / (1.0 - ab)
        c1 = np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab)
        x = x0_hat * c0 + x * c1
        s = sigma_scale * sched.sigma[t - 1]
        if s != 0.0:
            x = x + Tensor(s * rng.standard_normal(x.shape))
    return x


def _forward_batch(model: ClearModel, images, cfg: TrainConfig, seed,
                   training: bool, snr_db=None, rate=None,
                   addm_enabled=None, snr_channel_db=None):
    """Shared train/eval forward pass; returns (reconstruction Tensor,
    per-image conditioning).

    snr_channel_db lets the jittered training mode drive the gates,
    conditioning, and chain depth with snr_db while the physical channel
    stays at a fixed operating point; the noise top-up below keeps the
    chain input consistent with the claimed depth either way.  Evaluation
    leaves it None so both views agree."""
    snr = cfg.snr_train if snr_db is None else snr_db
    rate = cfg.compression_rate if rate is None else rate
    addm = cfg.addm_enabled if addm_enabled is None else addm_enabled
    ccfg = replace(cfg.channel,
                   snr_db=snr if snr_channel_db is None else snr_channel_db)
    rng = np.random.default_rng(seed)

    f = encode(images, model.cp, snr, model.codec_cfg, training=training)
    sel = rate_select(f, rate)
    norm = normalize_power(sel)
    rx, csis, conds = transmit(norm, ccfg, seed)
    if snr_channel_db is not None:
        # the top-up below reshapes the corruption to the claimed snr, so
        # the conditioning should carry the claimed label, not the pilot fit
        conds = conds.copy()
        conds[:, 0] = conditioning_vector(snr, 0.0, 0.0)[0]
    if addm:
        # training constructs its corruption at the declared (or claimed)
        # level, so depth follows that level; at inference the receiver only
        # has the pilot fit, and a fade the equalizer cannot undo shows up
        # as a lower estimate and a deeper chain
        if training or snr_channel_db is not None:
            depth_db = snr
        else:
            depth_db = COND_SNR_LO + float(conds[:, 0].mean()) \
                * (COND_SNR_HI - COND_SNR_LO)
        t0 = pick_t_start(model.sched, depth_db)
        if t0 > 0:
            ab = model.sched.alpha_bar[t0 - 1]
            have = ab * 10.0 ** (-depth_db / 10.0)
            need = max((1.0 - ab) - have, 0.0)
            x = rx * np.sqrt(ab)
            if need > 0:
                x = x + Tensor(np.sqrt(need)
                               * rng.standard_normal(rx.shape))
            rx = denoise_chain(x, t0, model.den, model.sched, conds, rng,
                               sigma_scale=0.0, clip_x0=CHAIN_X0_CLIP)
    # the receiver never learns the transmitter's per-image power scale, so
    # the decoder works in the normalized-power domain; this also keeps the
    # decoder-side batch-norm statistics bounded across operating points
    feats = SemanticFeatures(rx, norm.mask)
    out = decode(feats, model.cp, snr, model.codec_cfg, training=training)
    return out, conds


def train_clear(images: np.ndarray, cfg: TrainConfig,
                codec_cfg: CodecConfig | None = None,
                model: ClearModel | None = None,
                denoiser_base: int = 16):
    """Joint end-to-end optimization of encoder, decoder, and denoiser.

    images: (M, 3, H, W) in [0, 1]. Returns (model, loss history); the
    history holds one mean training loss per epoch and feeds the early
    stopping rule.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError("dataset must be a nonempty (M, 3, H, W) batch")
    if codec_cfg is None:
        codec_cfg = CodecConfig(height=images.shape[2], width=images.shape[3],
                                compression_rate=cfg.compression_rate)
    if model is None:
        model = init_model(codec_cfg, cfg.seed, denoiser_base=denoiser_base,
                           schedule_T=cfg.denoise_steps)
    rng = np.random.default_rng(cfg.seed)
    m = images.shape[0]
    if cfg.addm_pretrain_epochs > 0:
        _pretrain_denoiser(model, images, cfg, rng)
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(m)
        epoch_losses = []
        for b0 in range(0, m, cfg.batch_size):
            batch = images[order[b0:b0 + cfg.batch_size]]
            step_seed = int(rng.integers(2 ** 62))
            step_snr, chan_snr = None, None
            if cfg.snr_spread_db > 0:
                # jitter the claimed snr only: the physical channel keeps
                # its training operating point so the batch-norm statistics
                # stay stationary, and the chain's noise top-up makes the
                # claimed depth honest
                step_snr = cfg.snr_train + rng.uniform(
                    -cfg.snr_spread_db, cfg.snr_spread_db)
                chan_snr = cfg.snr_train
            model.pset.zero_grad()
            # tensors refuse to hold non-finite values, so a diverging step
            # surfaces as FloatingPointError somewhere inside the graph
            try:
                out, _ = _forward_batch(model, batch, cfg, step_seed,
                                        training=True, snr_db=step_snr,
                                        snr_channel_db=chan_snr)
                loss = mse_loss(out, batch)
                grads = backward(loss, model.pset)
                if cfg.grad_clip_norm > 0:
                    clip_grad_norm(grads, cfg.grad_clip_norm)
                adam_step(model.pset, grads, cfg.learning_rate)
            except FloatingPointError as exc:
                raise RuntimeError(
                    f"non-finite loss at batch {b0 // cfg.batch_size} "
                    f"of epoch {epoch}: {exc}") from exc
            epoch_losses.append(float(loss.data))
        history.append(float(np.mean(epoch_losses)))
        if early_stop_update(history, cfg.patience, cfg.min_delta):
            break
    return model, history


def _pretrain_denoiser(model: ClearModel, images, cfg: TrainConfig, rng):
    """Staged mode: fit the denoiser alone on faded encoder features before
    the joint phase (the codec stays frozen here)."""
    m = images.shape[0]
    for _ in range(cfg.addm_pretrain_epochs):
        order = rng.permutation(m)
        for b0 in range(0, m, cfg.batch_size):
            batch = images[order[b0:b0 + cfg.batch_size]]
            snr = cfg.snr_train
            if cfg.snr_spread_db > 0:
                snr += rng.uniform(-cfg.snr_spread_db, cfg.snr_spread_db)
            cond = tuple(conditioning_vector(snr, cfg.channel.doppler_scale,
                                             cfg.channel.phase_noise_scale))
            with no_grad():
                # batch statistics: the running averages are still at their
                # init values this early, eval mode would misnormalize
                f = encode(batch, model.cp, snr, model.codec_cfg,
                           training=True)
                x0 = normalize_power(rate_select(
                    f, cfg.compression_rate)).x0.data
            # forward diffusion fades through a noiseless shadow of this
            # realization, so its own snr field is never read
            h = realize_channel(cfg.channel, x0[0].size,
                                int(rng.integers(2 ** 62)))
            train_step(x0, h, model.sched, model.den, cfg.learning_rate,
                       int(rng.integers(2 ** 62)), cond=cond)


def early_stop_update(history, patience: int, min_delta: float = 1e-6) -> bool:
    """True when the monitored loss has not improved by more than min_delta
    for `patience` consecutive epochs."""
    if not history:
        raise ValueError("history must be nonempty")
    if patience < 1:
        return False
    best = history[0]
    stale = 0
    for v in history[1:]:
        if v < best - min_delta:
            best = v
            stale = 0
        else:
            stale += 1
    return stale >= patience


def evaluate_cell(model: ClearModel, images, cfg: TrainConfig, snr_db: float,
                  condition, rate: float, trials: int, seed: int,
                  addm_enabled=None):
    """Mean PSNR/MSE for one grid cell; per-trial fresh realizations.
    Returns (mean psnr, mean mse, per-trial psnr array)."""
    name, profile, ds, pn = condition
    ccfg = replace(cfg.channel, profile=profile, doppler_scale=ds,
                   phase_noise_scale=pn, snr_db=snr_db)
    cell_cfg = replace(cfg, channel=ccfg)
    psnrs, mses = np.zeros(trials), np.zeros(trials)
    with no_grad():
        for k in range(trials):
            img = images[k % len(images)][None]
            out, _ = _forward_batch(model, img, cell_cfg,
                                    seed=seed + 7919 * k, training=False,
                                    snr_db=snr_db, rate=rate,
                                    addm_enabled=addm_enabled)
            mses[k] = float(np.mean((out.data - img) ** 2))
            psnrs[k] = psnr(out.data, img)
    return float(psnrs.mean()), float(mses.mean()), psnrs


def evaluate_grid(model: ClearModel, images, cfg: TrainConfig, snr_list,
                  conditions=CHANNEL_CONDITIONS, rates=(0.3, 0.6),
                  trials: int = 8, seed: int = 0, addm_enabled=None,
                  n_threads: int | None = None) -> EvalResult:
    """PSNR/MSE over snr x channel condition x rate with per-cell seed
    streams; rows come back sorted by (channel, ds, pn, rate, snr)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cells = []
    for ci, cond in enumerate(conditions):
        for ri, rate in enumerate(rates):
            for si, snr in enumerate(snr_list):
                cell_seed = seed + 1_000_003 * ci + 10_007 * ri + 101 * si
                cells.append((cond, rate, snr, cell_seed))

    def run(cell):
        cond, rate, snr, cell_seed = cell
        mean_psnr, mean_mse, _ = evaluate_cell(
            model, images, cfg, snr, cond, rate, trials, cell_seed,
            addm_enabled=addm_enabled)
        return {"snr_test_db": snr, "channel": cond[0], "ds": cond[2],
                "pn": cond[3], "rate": rate, "trials": trials,
                "mean_psnr_db": mean_psnr, "mean_mse": mean_mse}

    if n_threads is None:
        n_threads = int(os.environ.get("CLEAR_THREADS", "1"))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            rows = list(ex.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    rows.sort(key=lambda r: (r["channel"], r["ds"], r["pn"], r["rate"],
                             r["snr_test_db"]))
    return EvalResult(rows, trials, seed)


def paired_ablation(model: ClearModel, images, cfg: TrainConfig,
                    snr_db: float, condition, rate: float, trials: int,
                    seed: int):
    """Per-trial PSNR with the denoiser on vs off under identical seeds
    (same realizations and noise), for paired comparison."""
    _, _, on = evaluate_cell(model, images, cfg, snr_db, condition, rate,
                             trials, seed, addm_enabled=True)
    _, _, off = evaluate_cell(model, images, cfg, snr_db, condition, rate,
                              trials, seed, addm_enabled=False)
    return on, off

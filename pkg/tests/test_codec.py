import itertools

import numpy as np
import pytest

from clearcomm.codec import (CodecConfig, CodecParams, SemanticFeatures,
                             afb_gains, afb_modulate, decode, denormalize,
                             encode, init_codec_params, normalize_power,
                             pack_complex, rate_select, snr_unit,
                             unpack_complex)
from clearcomm.tensor import Tensor
from helpers import check_grad

RNG = np.random.default_rng(17)


def tiny_cfg(**kw):
    base = dict(height=16, width=16, stages=2, base_filters=8,
                compression_rate=0.6)
    base.update(kw)
    return CodecConfig(**base)


# -- config -------------------------------------------------------------------

def test_config_rejects_bad_extents():
    with pytest.raises(ValueError, match="divisible"):
        CodecConfig(height=30, width=32, stages=2, base_filters=8)


def test_config_rejects_odd_base():
    with pytest.raises(ValueError, match="even"):
        CodecConfig(height=16, width=16, stages=1, base_filters=5)


def test_config_rejects_rate_out_of_range():
    for r in (0.0, -0.2, 1.5):
        with pytest.raises(ValueError, match="compression_rate"):
            tiny_cfg(compression_rate=r)


def test_config_rejects_rate_keeping_nothing():
    # 8x8, 2 stages, base 2 -> 4*2*2 = 16 coefficients; R = 0.05 keeps 0.8
    with pytest.raises(ValueError, match="zero"):
        CodecConfig(height=8, width=8, stages=2, base_filters=2,
                    compression_rate=0.05)


def test_feature_geometry_formula():
    cfg = CodecConfig(height=32, width=32, stages=2, base_filters=32)
    assert cfg.feature_shape() == (64, 8, 8)
    assert cfg.feature_count() == 64 * 8 * 8


# -- encode -------------------------------------------------------------------

def test_encode_output_extents():
    cfg = CodecConfig(height=32, width=32, stages=2, base_filters=32)
    cp = init_codec_params(cfg, np.random.default_rng(0))
    f = encode(RNG.uniform(size=(2, 3, 32, 32)), cp, 15.0, cfg)
    assert f.shape == (2, 64, 8, 8)


def test_encode_zero_image_zero_bias_gives_zero_features():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(1))
    # biases and batch-norm betas initialize to zero, so a zero image stays
    # zero through every stage
    f = encode(np.zeros((1, 3, 16, 16)), cp, 10.0, cfg)
    assert np.allclose(f.x0.data, 0.0, atol=1e-300)


def test_encode_deterministic():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(2))
    img = RNG.uniform(size=(1, 3, 16, 16))
    a = encode(img, cp, 15.0, cfg).x0.data
    b = encode(img, cp, 15.0, cfg).x0.data
    assert np.array_equal(a, b)


def test_encode_rejects_wrong_extents():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(2))
    with pytest.raises(ValueError, match="extents"):
        encode(np.zeros((1, 3, 8, 8)), cp, 15.0, cfg)
    with pytest.raises(ValueError, match="image batch"):
        encode(np.zeros((3, 16, 16)), cp, 15.0, cfg)


def test_encode_lipschitz_golden():
    # ratio measured once on this exact probe pair and recorded; the bound
    # must keep holding bit-for-bit
    golden = 0.9571994618602547
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(1, 3, 16, 16))
    b = np.clip(a + 0.05 * np.random.default_rng(5).standard_normal(a.shape),
                0, 1)
    fa = encode(a, cp, 15.0, cfg).x0.data
    fb = encode(b, cp, 15.0, cfg).x0.data
    ratio = np.linalg.norm(fa - fb) / np.linalg.norm(a - b)
    assert ratio <= golden * (1 + 1e-9)
    assert np.isclose(ratio, golden, rtol=1e-10)


# -- adaptive feature gates ---------------------------------------------------

def open_gate_params(cfg, seed):
    cp = init_codec_params(cfg, np.random.default_rng(seed))
    for s in range(cfg.stages):
        p = f"encoder.s{s}.afb"
        cp.pset[f"{p}.w2"].data[:] = 0.0
        cp.pset[f"{p}.b2"].data[:] = 40.0   # sigmoid(40) rounds to 1.0 exactly
    return cp


def test_afb_open_gate_is_identity():
    cfg = tiny_cfg()
    cp = open_gate_params(cfg, 6)
    x = Tensor(RNG.standard_normal((2, 8, 4, 4)))
    out = afb_modulate(x, 12.0, cp.pset, "encoder.s0.afb")
    assert np.array_equal(out.data, x.data)


def test_afb_gains_in_unit_interval():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(7))
    for trial in range(5):
        x = Tensor(RNG.standard_normal((3, 16, 4, 4)) * (trial + 1))
        g = afb_gains(x, 10.0 * trial - 5.0, cp.pset, "encoder.s1.afb").data
        assert np.all(g > 0.0) and np.all(g <= 1.0)


def test_afb_gains_respond_to_snr():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(8))
    x = Tensor(RNG.standard_normal((1, 8, 4, 4)))
    g0 = afb_gains(x, 0.0, cp.pset, "encoder.s0.afb").data
    g20 = afb_gains(x, 20.0, cp.pset, "encoder.s0.afb").data
    assert not np.allclose(g0, g20)


def test_afb_rejects_non_finite_snr():
    with pytest.raises(ValueError, match="finite"):
        snr_unit(float("inf"))


def test_snr_unit_matches_conditioning_window():
    assert snr_unit(-5.0) == 0.0
    assert snr_unit(30.0) == 1.0
    assert np.isclose(snr_unit(15.0), 4.0 / 7.0)


# -- rate selection -----------------------------------------------------------

def test_rate_select_full_rate_is_identity():
    x = RNG.standard_normal((1, 4, 3, 3))
    f = rate_select(SemanticFeatures(Tensor(x)), 1.0)
    assert np.array_equal(f.x0.data, x)
    assert f.mask.all()


def test_rate_select_scalar_example():
    vals = np.arange(10, 0, -1, dtype=float)        # 10, 9, ..., 1
    f = rate_select(SemanticFeatures(Tensor(vals)), 0.3)
    assert f.mask.sum() == 3
    assert np.array_equal(f.x0.data, np.where(vals >= 8, vals, 0.0))


def test_rate_select_pair_count_exact():
    x = RNG.standard_normal((2, 8, 4, 4))           # N = 128 per image
    f = rate_select(SemanticFeatures(Tensor(x)), 0.3)
    want = int(np.ceil(0.3 * 128))                   # 39 -> rounded to 40
    want += want % 2
    assert np.array_equal(f.mask.sum(axis=(1, 2, 3)), [want, want])
    # both planes of a pair share the decision
    assert np.array_equal(f.mask[:, 0::2], f.mask[:, 1::2])


def test_rate_select_scalar_energy_optimal_exhaustive():
    for n in (6, 9, 12):
        vals = RNG.standard_normal(n)
        k = int(np.ceil(0.4 * n))
        f = rate_select(SemanticFeatures(Tensor(vals)), 0.4)
        kept = (vals[f.mask] ** 2).sum()
        best = max((vals[list(c)] ** 2).sum()
                   for c in itertools.combinations(range(n), k))
        assert np.isclose(kept, best, rtol=1e-12)


def test_rate_select_paired_energy_optimal_exhaustive():
    # 6 pairs in a (1, 4, 3, 1) block; enumerate every pair subset
    x = RNG.standard_normal((1, 4, 3, 1))
    f = rate_select(SemanticFeatures(Tensor(x)), 0.5)
    pairs = (x[0, 0::2] ** 2 + x[0, 1::2] ** 2).ravel()
    n_kept = f.mask[0, 0::2].sum()
    kept = pairs[f.mask[0, 0::2].ravel()].sum()
    best = max(pairs[list(c)].sum()
               for c in itertools.combinations(range(6), n_kept))
    assert np.isclose(kept, best, rtol=1e-12)


def test_rate_select_gradient_blocked_at_dropped_positions():
    x = Tensor(RNG.standard_normal((1, 4, 2, 2)), requires_grad=True)
    f = rate_select(SemanticFeatures(x), 0.5)
    (f.x0 * f.x0).sum().backward()
    assert np.all(x.grad[~f.mask] == 0.0)
    assert np.any(x.grad[f.mask] != 0.0)


def test_rate_select_rejects_bad_rate():
    f = SemanticFeatures(Tensor(RNG.standard_normal(8)))
    with pytest.raises(ValueError, match="rate"):
        rate_select(f, 0.0)


# -- power normalization ------------------------------------------------------

def features_with_magnitude(mag, pairs=6):
    x = np.zeros((1, 2, pairs, 1))
    x[0, 0] = mag                                    # re = mag, im = 0
    return SemanticFeatures(Tensor(x))


def test_normalize_constant_magnitude_two_halves():
    f = normalize_power(features_with_magnitude(2.0))
    assert np.allclose(f.x0.data[0, 0], 1.0, atol=1e-12)
    assert np.allclose(f.scale.data, 2.0, atol=1e-12)


def test_normalize_unit_power_random():
    for _ in range(5):
        x = RNG.standard_normal((3, 8, 4, 4)) * RNG.uniform(0.1, 7.0)
        f = normalize_power(SemanticFeatures(Tensor(x)))
        p = (f.x0.data ** 2).sum(axis=(1, 2, 3)) / (8 * 4 * 4 / 2)
        assert np.allclose(p, 1.0, atol=1e-9)


def test_normalize_idempotent():
    x = RNG.standard_normal((2, 4, 3, 3))
    once = normalize_power(SemanticFeatures(Tensor(x)))
    twice = normalize_power(once)
    assert np.allclose(twice.x0.data, once.x0.data, atol=1e-12)
    assert np.allclose(twice.scale.data, 1.0, atol=1e-12)


def test_normalize_counts_active_symbols_only():
    x = RNG.standard_normal((1, 4, 4, 4))
    sel = rate_select(SemanticFeatures(Tensor(x)), 0.5)
    f = normalize_power(sel)
    m = f.mask[0]
    p = (f.x0.data[0][m] ** 2).sum() / (m.sum() / 2)
    assert np.isclose(p, 1.0, atol=1e-9)


def test_normalize_rejects_zero_input():
    with pytest.raises(ValueError, match="nonzero|active"):
        normalize_power(SemanticFeatures(Tensor(np.zeros((1, 2, 2, 2)))))


def test_denormalize_restores_scale():
    x = RNG.standard_normal((2, 4, 3, 3)) * 3.7
    f = SemanticFeatures(Tensor(x))
    back = denormalize(normalize_power(f))
    assert np.allclose(back.x0.data, x, atol=1e-9)


# -- decode -------------------------------------------------------------------

def test_decode_zero_features_gives_constant_bias():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(9))
    cp.pset["decoder.out.b"].data[:] = [0.3, 0.5, 0.7]
    c, h, w = cfg.feature_shape()
    f = SemanticFeatures(Tensor(np.zeros((1, c, h, w))))
    out = decode(f, cp, 15.0, cfg).data
    for ch, val in enumerate((0.3, 0.5, 0.7)):
        assert np.allclose(out[0, ch], val, atol=1e-12)


def test_decode_output_in_unit_range():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(10))
    c, h, w = cfg.feature_shape()
    f = SemanticFeatures(Tensor(RNG.standard_normal((2, c, h, w)) * 5))
    out = decode(f, cp, 15.0, cfg).data
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_decode_rejects_shape_mismatch():
    cfg = tiny_cfg()
    cp = init_codec_params(cfg, np.random.default_rng(11))
    with pytest.raises(ValueError, match="feature shape"):
        decode(SemanticFeatures(Tensor(np.zeros((1, 4, 4, 4)))), cp, 15.0,
               cfg)


@pytest.mark.parametrize("h,w,stages,base", [(32, 32, 2, 32), (16, 16, 2, 8),
                                             (16, 16, 1, 16)])
def test_round_trip_shape(h, w, stages, base):
    cfg = CodecConfig(height=h, width=w, stages=stages, base_filters=base)
    cp = init_codec_params(cfg, np.random.default_rng(12))
    img = RNG.uniform(size=(2, 3, h, w))
    out = decode(encode(img, cp, 15.0, cfg), cp, 15.0, cfg)
    assert out.shape == img.shape


# -- complex packing ----------------------------------------------------------

def test_pack_unpack_round_trip():
    x = RNG.standard_normal((2, 6, 3, 3))
    f = rate_select(SemanticFeatures(Tensor(x)), 0.4)
    z = pack_complex(f)
    assert all(len(v) == f.mask[i, 0::2].sum() for i, v in enumerate(z))
    grid = unpack_complex(z, f.mask)
    assert np.array_equal(grid, f.x0.data)


def test_unpack_rejects_count_mismatch():
    f = rate_select(SemanticFeatures(Tensor(RNG.standard_normal((1, 4, 2, 2)))),
                    0.5)
    z = pack_complex(f)
    with pytest.raises(ValueError, match="count"):
        unpack_complex([z[0][:-1]], f.mask)


# -- differentiability --------------------------------------------------------

def test_channel_free_gradients_pass_finite_differences():
    # full composed graph at desk-tiny geometry: encode -> select ->
    # normalize -> decode -> mse against the input image
    cfg = CodecConfig(height=8, width=8, stages=1, base_filters=4,
                      compression_rate=0.8, snr_conditioning=True)
    cp = init_codec_params(cfg, np.random.default_rng(13))
    img = RNG.uniform(0.2, 0.8, size=(1, 3, 8, 8))
    probes = ["encoder.s0.conv.w", "encoder.s0.res.b", "encoder.s0.attn.wv",
              "encoder.s0.afb.w2", "encoder.s0.bn.gamma",
              "decoder.s0.tconv.w", "decoder.out.b"]

    def make_loss(*tensors):
        for name, t in zip(probes, tensors):
            cp.pset.replace(name, t)
        f = encode(img, cp, 12.0, cfg, training=True)
        f = normalize_power(rate_select(f, cfg.compression_rate))
        out = decode(f, cp, 12.0, cfg, training=True)
        diff = out - Tensor(img)
        return (diff * diff).mean()

    check_grad(make_loss, [cp.pset[n].data.copy() for n in probes],
               tol=1e-4, step=1e-6)

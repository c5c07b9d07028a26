import numpy as np
import pytest

from spirdet.backbone import (build_model, encoder_forward, fuse_model, input_stem, named_arrays, neck_forward,
                              param_count, predict, randomize_bn)
from spirdet.config import ConfigError, ModelConfig, toy_config, variant_config
from spirdet.layers import ConvBN
from spirdet.tensor_ops import (ConvSpec, ShapeError, batch_norm_inference, bilinear_upsample, combine, conv2d,
                                relu)


def small(variant="lr", **kw):
    """Variant layout with narrow channels and a small input for quick tests."""
    base = dict(input_size=(64, 64), channels_per_stage=(4, 8, 8, 16), coarse_ratio=8, fine_ratio=4, alpha=0.05)
    base.update(kw)
    return variant_config(variant, **base)


def calibrated(config, seed=0):
    m = build_model(config, seed)
    h, w = config.input_size
    return randomize_bn(m, seed, calibrate=np.random.default_rng(seed).random((2, 1, h, w), dtype=np.float32))


def test_variant_block_layouts():
    assert variant_config("m").blocks_per_stage == (2, 6, 8, 1)
    assert variant_config("m").input_size == (512, 512)
    assert variant_config("m").sparse_convs == 4
    lr = variant_config("lr")
    assert lr.blocks_per_stage == (4, 2, 2, 1) and lr.input_size == (256, 256)
    assert variant_config("t").blocks_per_stage == (1, 2, 2, 1)
    assert variant_config("s").blocks_per_stage == (1, 4, 4, 1)


def test_stage_strides():
    m = build_model(small())
    for i, stage in enumerate(m.stages):
        assert stage[0].stride == (2 if i else 1)
        assert all(b.stride == 1 for b in stage[1:])


def test_same_seed_same_parameters():
    a, b = build_model(small(), 7), build_model(small(), 7)
    for (na, xa), (nb, xb) in zip(named_arrays(a), named_arrays(b)):
        assert na == nb and np.array_equal(xa, xb)
    c = build_model(small(), 8)
    assert not np.array_equal(a.stem.weight, c.stem.weight)


@pytest.mark.parametrize("kw,field", [(dict(blocks_per_stage=(1, 0, 1, 1)), "blocks_per_stage"),
                                      (dict(channels_per_stage=(4, 8)), "channels_per_stage"),
                                      (dict(alpha=0.0), "alpha"), (dict(K=0), "K"),
                                      (dict(coarse_ratio=8, fine_ratio=2), "coarse_ratio"),
                                      (dict(input_size=(60, 64)), "input_size"),
                                      (dict(alpha=0.0001), "alpha")])
def test_invalid_config_names_field(kw, field):
    with pytest.raises(ConfigError) as e:
        small(**kw)
    assert e.value.field == field
    with pytest.raises(ConfigError):
        ModelConfig(variant="xl")


def test_input_stem_shape_zero_and_composition(rng):
    m = randomize_bn(build_model(small()), 3)
    x = rng.random((1, 1, 64, 64)).astype(np.float32)
    out = input_stem(x, m.stem)
    assert out.shape == (1, 4, 64, 64)
    s = m.stem
    ref = relu(batch_norm_inference(conv2d(x, s.weight, None, ConvSpec((3, 3), 1, 1)), s.bn))
    np.testing.assert_allclose(out, ref, atol=1e-6)
    z = build_model(small())
    assert not input_stem(np.zeros((1, 1, 8, 8), np.float32), z.stem).any()
    with pytest.raises(ShapeError):
        input_stem(np.zeros((1, 2, 8, 8), np.float32), m.stem)


def test_encoder_shapes():
    cfg = variant_config("lr", channels_per_stage=(4, 4, 8, 8), alpha=0.01)
    pyr = encoder_forward(np.zeros((1, 1, 256, 256), np.float32), build_model(cfg))
    assert [p.shape[2] for p in pyr] == [256, 128, 64, 32]
    assert [p.shape[1] for p in pyr] == [4, 4, 8, 8]
    with pytest.raises(ShapeError):
        encoder_forward(np.zeros((1, 1, 60, 60), np.float32), build_model(small()))


def to_float64(model):
    m64 = build_model(model.config, 0, dtype=np.float64)
    if model.fused:
        m64 = fuse_model(m64)
    for (_, dst), (_, src) in zip(named_arrays(m64), named_arrays(model)):
        dst[...] = src
    return m64


def test_fusion_is_exact_in_double(rng):
    m64 = to_float64(calibrated(small()))
    f64 = fuse_model(m64)
    x = rng.random((2, 1, 64, 64))
    for a, b in zip(encoder_forward(x, m64), encoder_forward(x, f64)):
        assert np.abs(a - b).max() <= 1e-10


def test_encoder_fusion_ten_inputs(backend, rng):
    m = calibrated(small(blocks_per_stage=(2, 1, 1, 1)))
    f = fuse_model(m)
    for _ in range(10):
        x = rng.random((1, 1, 64, 64)).astype(np.float32)
        for a, b in zip(encoder_forward(x, m), encoder_forward(x, f)):
            assert np.abs(a - b).max() <= 1e-4


def test_batch_independence(rng):
    m = fuse_model(calibrated(small()))
    x = rng.random((1, 1, 64, 64)).astype(np.float32)
    one = encoder_forward(x, m)
    two = encoder_forward(np.concatenate([x, x]), m)
    for a, b in zip(one, two):
        np.testing.assert_array_equal(b[0], a[0])
        np.testing.assert_array_equal(b[1], a[0])


def test_neck_zero_branch_is_identity(rng):
    m = build_model(small())
    pyr = encoder_forward(rng.random((1, 1, 64, 64)).astype(np.float32), m)
    for layer in m.neck.values():
        layer.weight[...] = 0
    fused = neck_forward(pyr, m.neck)
    for a, b in zip(pyr, fused):
        assert a.shape == b.shape
        np.testing.assert_array_equal(a, b)


def test_neck_matches_step_by_step(rng):
    m = randomize_bn(build_model(small(), 2), 2)
    pyr = [rng.standard_normal(p.shape).astype(np.float32)
           for p in encoder_forward(np.zeros((1, 1, 64, 64), np.float32), m)]
    out = neck_forward(pyr, m.neck)
    ref = list(pyr)
    for lvl in sorted(m.neck, reverse=True):
        layer = m.neck[lvl]
        cat = combine([bilinear_upsample(ref[lvl + 1], 2), ref[lvl]], "concat_channels")
        y = relu(batch_norm_inference(conv2d(cat, layer.weight, None, ConvSpec((3, 3), 1, 1)), layer.bn))
        ref[lvl] = combine([ref[lvl], y], "add")
    for a, b in zip(out, ref):
        assert a.shape == b.shape
        np.testing.assert_allclose(a, b, atol=1e-6)
    assert np.array_equal(out[-1], pyr[-1])


def test_neck_rejects_channel_mismatch(rng):
    m = build_model(small())
    pyr = encoder_forward(np.zeros((1, 1, 64, 64), np.float32), m)
    pyr[-1] = np.zeros(pyr[-1].shape[:1] + (3,) + pyr[-1].shape[2:], np.float32)
    with pytest.raises(ShapeError):
        neck_forward(pyr, m.neck)


@pytest.mark.parametrize("variant", ["lr", "t", "s", "m"])
def test_fused_parameter_count_at_most_half(variant):
    m = build_model(variant_config(variant))
    assert param_count(fuse_model(m)) <= 0.5 * param_count(m)


def _receptive_radius(config):
    """Half-width (input pixels) of the deepest map's receptive field, and its stride."""
    radius, jump = 1, 1                 # stem 3x3
    for i, nb in enumerate(config.blocks_per_stage):
        for j in range(nb):
            radius += jump              # 3x3 in the depthwise slot; the 1x1 adds nothing
            if i > 0 and j == 0:
                jump *= 2
    return radius, jump


def test_receptive_field_is_bounded(rng):
    cfg = small(blocks_per_stage=(1, 1, 1, 1))
    m = fuse_model(calibrated(cfg))
    x = rng.random((1, 1, 64, 64)).astype(np.float32)
    base = encoder_forward(x, m)[-1]
    x2 = x.copy()
    x2[0, 0, 30, 22] += 1.0
    diff = np.abs(encoder_forward(x2, m)[-1] - base).max(axis=1)[0]
    radius, jump = _receptive_radius(cfg)
    ys, xs = np.nonzero(diff > 0)
    assert len(ys) > 0
    assert np.all(np.abs(ys * jump - 30) <= radius) and np.all(np.abs(xs * jump - 22) <= radius)


def test_predict_output_ranges(rng):
    cfg = toy_config()
    m = fuse_model(build_model(cfg))
    v, o = predict(m, rng.random((2, 1, 64, 64)).astype(np.float32))
    assert v.shape == (2, 1, 16, 16) and o.shape == (2, 1, 64, 64)
    assert v.min() >= 0 and v.max() <= 1 and o.min() >= 0 and o.max() <= 1


def test_fuse_model_shares_nothing():
    m = build_model(small())
    f = fuse_model(m)
    assert f.fused and not m.fused
    assert isinstance(m.stem, ConvBN)
    f.upsample.bias[...] = 99
    assert m.upsample.bias[0] != 99
    assert fuse_model(f) is f

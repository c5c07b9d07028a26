import numpy as np
import pytest

from spirdet import autograd as ag
from spirdet.backbone import build_model
from spirdet.config import toy_config
from spirdet.losses import (LossBreakdown, bank_penalties, coarse_gt, objective, soft_iou_loss, total_loss)
from spirdet.ortho import concat_filters, ortho_penalty


def test_perfect_prediction_zero_loss():
    g = np.zeros((4, 4))
    g[1, 2] = 1
    assert soft_iou_loss(g, g) == pytest.approx(0.0, abs=1e-12)


def test_zero_prediction_closed_form():
    g = np.zeros((5, 5))
    g[:2, :2] = 1
    eps = 1e-6
    assert soft_iou_loss(np.zeros_like(g), g, eps) == pytest.approx(1 - eps / (4 + eps), rel=1e-12)


def test_uniform_half_example():
    g = np.zeros((2, 2))
    g[0, 0] = 1
    assert soft_iou_loss(np.full((2, 2), 0.5), g, eps=0.0) == pytest.approx(0.8, abs=1e-12)
    assert soft_iou_loss(np.full((2, 2), 0.5), g) == pytest.approx(0.8, abs=1e-6)


def test_rejects_non_binary_and_mismatch():
    with pytest.raises(ValueError):
        soft_iou_loss(np.zeros((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        soft_iou_loss(np.zeros((2, 2)), np.zeros((3, 3)))


def test_soft_iou_permutation_symmetric(rng):
    p = rng.random(64)
    g = (rng.random(64) < 0.2).astype(float)
    perm = rng.permutation(64)
    assert soft_iou_loss(p[perm], g[perm]) == pytest.approx(soft_iou_loss(p, g), rel=1e-12)


def test_soft_iou_decreases_toward_target(rng):
    for _ in range(10):
        g = (rng.random((8, 8)) < 0.2).astype(float)
        g[0, 0] = 1
        p0 = rng.random((8, 8))
        losses = [soft_iou_loss(p0 + t * (g - p0), g) for t in np.linspace(0, 1, 21)]
        assert all(b < a for a, b in zip(losses, losses[1:]))


def test_coarse_gt_examples(rng):
    g = np.zeros((32, 32), np.uint8)
    g[12, 20] = 1
    c = coarse_gt(g, 8)
    assert c.shape == (4, 4) and np.argwhere(c).tolist() == [[1, 2]]
    assert not coarse_gt(np.zeros((1, 16, 16)), 8).any()
    r = (rng.random((2, 1, 16, 24)) < 0.05).astype(np.uint8)
    c = coarse_gt(r, 4)
    for b in range(2):
        for i in range(4):
            for j in range(6):
                assert c[b, 0, i, j] == r[b, 0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].max()


def _orthonormalize(model):
    for bank in model.downsampling_banks():
        K, o = bank.shape[:2]
        f = bank.reshape(K * o, -1).astype(np.float64)
        # rows orthonormal when K*o <= in*9
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal(f.shape[::-1]))
        bank[...] = q.T.reshape(bank.shape)


def test_total_zero_with_perfect_predictions_and_orthonormal_banks():
    cfg = toy_config()
    m = build_model(cfg)
    _orthonormalize(m)
    g = np.zeros((2, 1, 64, 64), np.uint8)
    g[0, 0, 10:12, 30:32] = 1
    g[1, 0, 40, 5] = 1
    res = total_loss(g.astype(float), coarse_gt(g, 4).astype(float), g, m)
    assert res.total == pytest.approx(0.0, abs=1e-9)


def test_orth_only_perturbation_separable():
    cfg = toy_config()
    m = build_model(cfg)
    rng = np.random.default_rng(2)
    g = (rng.random((1, 1, 64, 64)) < 0.01).astype(np.uint8)
    o, v = rng.random((1, 1, 64, 64)), rng.random((1, 1, 16, 16))
    a = total_loss(o, v, g, m)
    m.downsampling_banks()[0][...] *= 1.5
    b = total_loss(o, v, g, m)
    assert a.output_loss == b.output_loss and a.sparse_loss == b.sparse_loss
    assert a.orth_loss != b.orth_loss


def test_random_case_termwise(rng):
    m = build_model(toy_config(), 3)
    g = (rng.random((2, 1, 64, 64)) < 0.02).astype(np.uint8)
    o, v = rng.random((2, 1, 64, 64)), rng.random((2, 1, 16, 16))
    res = total_loss(o, v, g, m)
    gc = coarse_gt(g, 4)
    expect_orth = sum(ortho_penalty(concat_filters(b.astype(np.float64))) for b in m.downsampling_banks())
    assert res.output_loss == pytest.approx(soft_iou_loss(o, g))
    assert res.sparse_loss == pytest.approx(soft_iou_loss(v, gc))
    assert res.orth_loss == pytest.approx(expect_orth, rel=1e-9)
    assert res.total == pytest.approx(res.output_loss + res.sparse_loss + res.orth_loss)
    assert len(bank_penalties(m)) == 3


def test_objective_agrees_with_numpy_loss(rng):
    m = build_model(toy_config(), 5)
    g = (rng.random((2, 1, 64, 64)) < 0.02).astype(np.uint8)
    o, v = rng.random((2, 1, 64, 64)), rng.random((2, 1, 16, 16))
    total, parts = objective(o, v, g, m, ag.NoTape())
    ref = total_loss(o, v, g, m)
    assert float(total.data) == pytest.approx(ref.total, rel=1e-6)
    assert parts.output_loss == pytest.approx(ref.output_loss, rel=1e-9)
    _, no_orth = objective(o, v, g, m, ag.NoTape(), use_orth=False)
    assert no_orth.orth_loss == 0.0


def test_breakdown_dict():
    d = LossBreakdown(0.25, 0.5, 0.125).as_dict()
    assert d == {"output_loss": 0.25, "sparse_loss": 0.5, "orth_loss": 0.125, "total": 0.875}

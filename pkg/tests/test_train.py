import math
from dataclasses import replace

import numpy as np
import pytest

from spirdet.backbone import build_model, named_arrays
from spirdet.config import toy_config
from spirdet.gradcheck import tiny_config
from spirdet.metrics import connected_components
from spirdet.train import (AdamW, DatasetSpec, ParameterStore, Schedule, TrainingDivergence, adamw_step, cosine_lr,
                           decays, gen_synthetic, make_split, train_loop, write_history_csv)

TINY_DATA = DatasetSpec(n_train=8, n_test=4, size=32, seed=3)


def tiny32():
    return replace(tiny_config(), input_size=(32, 32))


# ------------------------------------------------------------- optimizer


def test_adamw_single_step_by_hand():
    model = build_model(tiny_config())
    store = ParameterStore(model)
    before = [p.copy() for p in store.params]
    rng = np.random.default_rng(0)
    store.grads = [rng.standard_normal(p.shape).astype(p.dtype) for p in store.params]
    lr, wd, eps = 0.01, 0.05, 1e-8
    AdamW(weight_decay=wd).step(store, lr)
    for p0, p1, g in zip(before, store.params, store.grads):
        g = g.astype(np.float64)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        decayed = p0 * (1 - lr * wd) if p0.ndim >= 4 else p0
        np.testing.assert_allclose(p1, decayed - lr * m_hat / (np.sqrt(v_hat) + eps), rtol=1e-5, atol=1e-7)


def test_first_step_is_sign_times_lr():
    model = build_model(tiny_config())
    store = ParameterStore(model)
    before = [p.copy() for p in store.params]
    store.grads = [np.full(p.shape, -3.0, p.dtype) for p in store.params]
    adamw_step(store, AdamW(weight_decay=0.0), 1e-3)
    for p0, p1 in zip(before, store.params):
        np.testing.assert_allclose(p1 - p0, 1e-3, rtol=1e-4)


def test_zero_gradient_no_decay_is_noop():
    model = build_model(tiny_config())
    store = ParameterStore(model)
    before = [p.copy() for p in store.params]
    opt = AdamW(weight_decay=0.0)
    for _ in range(3):
        opt.step(store, 0.1)
    for a, b in zip(before, store.params):
        np.testing.assert_array_equal(a, b)


def test_decay_touches_kernels_only():
    assert decays(np.zeros((2, 2, 3, 3))) and decays(np.zeros((2, 2, 2, 3, 3)))
    assert not decays(np.zeros(4)) and not decays(np.zeros((4, 4)))


def test_parameter_store_names_unique_and_shaped():
    store = ParameterStore(build_model(toy_config()))
    assert len(set(store.names)) == len(store)
    assert all(g.shape == p.shape for p, g in zip(store.params, store.grads))
    assert not any(n.endswith("running_mean") or n.endswith("running_var") for n in store.names)


# -------------------------------------------------------------- schedule


def test_cosine_endpoints_and_midpoint():
    s = Schedule(1000)
    assert cosine_lr(0, s) == pytest.approx(0.0015)
    assert cosine_lr(1000, s) == pytest.approx(0.0005)
    assert cosine_lr(500, s) == pytest.approx(0.0010)
    vals = [cosine_lr(t, s) for t in range(1001)]
    assert all(0.0005 - 1e-15 <= v <= 0.0015 + 1e-15 for v in vals)
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(1001, s)


# ---------------------------------------------------------- synthetic data


def test_no_targets_means_empty_mask():
    assert not gen_synthetic(0, 64, 0).mask.any()


def test_same_seed_same_sample():
    a, b = gen_synthetic((1, 2), 64, 2), gen_synthetic((1, 2), 64, 2)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = gen_synthetic((1, 3), 64, 2)
    assert not np.array_equal(a.image, c.image)


@pytest.mark.parametrize("seed", range(25))
def test_three_targets_three_small_components(seed):
    s = gen_synthetic(seed, 64, 3)
    comps = connected_components(s.mask)
    assert len(comps) == 3
    assert all(1 <= c.area <= 0.003 * 64 * 64 for c in comps)
    assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
    assert np.allclose(s.image * 255, np.round(s.image * 255), atol=1e-4)


def test_splits_disjoint_and_sized():
    spec = DatasetSpec(n_train=6, n_test=3, size=64, seed=1)
    xtr, ytr = make_split(spec, "train")
    xte, yte = make_split(spec, "test")
    assert xtr.shape == (6, 1, 64, 64) and yte.shape == (3, 1, 64, 64)
    assert not any(np.array_equal(a, b) for a in xtr for b in xte)
    assert all(1 <= len(connected_components(m)) <= 3 for m in ytr)


# ------------------------------------------------------------------ loop


def test_lr_zero_keeps_parameters_and_repeats_losses():
    cfg = tiny32()
    model = build_model(cfg, 0)
    before = {n: a.copy() for n, a in named_arrays(model) if not n.endswith(("running_mean", "running_var"))}
    res = train_loop(cfg, TINY_DATA, 2, seed=0, batch_size=8, lr_max=0.0, lr_min=0.0, weight_decay=0.05,
                     evaluate_at_end=False, model=model)
    for n, a in named_arrays(res.model):
        if n in before:
            np.testing.assert_array_equal(a, before[n])
    h0, h1 = res.history[0].losses, res.history[1].losses
    assert h0.output_loss == h1.output_loss and h0.sparse_loss == h1.sparse_loss and h0.orth_loss == h1.orth_loss


def test_training_is_bitwise_reproducible():
    cfg = tiny32()
    a = train_loop(cfg, TINY_DATA, 2, seed=4, batch_size=4, evaluate_at_end=False)
    b = train_loop(cfg, TINY_DATA, 2, seed=4, batch_size=4, evaluate_at_end=False)
    for (na, xa), (nb, xb) in zip(named_arrays(a.model), named_arrays(b.model)):
        assert na == nb and np.array_equal(xa, xb)
    assert [r.losses for r in a.history] == [r.losses for r in b.history]


def test_losses_finite_and_history_written(tmp_path):
    cfg = tiny32()
    res = train_loop(cfg, TINY_DATA, 3, seed=1, batch_size=4, log_path=tmp_path / "h.csv")
    assert all(math.isfinite(r.losses.total) for r in res.history)
    assert [r.epoch for r in res.history] == [0, 1, 2]
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,output_loss,sparse_loss,orth_loss,total" and len(lines) == 4
    assert res.report is not None and 0 <= res.report.miou <= 1
    assert res.history[-1].lr == pytest.approx(0.0005)


def test_divergence_aborts():
    cfg = tiny32()
    model = build_model(cfg, 0)
    model.upsample.bias[...] = np.nan
    with pytest.raises(TrainingDivergence) as e:
        train_loop(cfg, TINY_DATA, 1, seed=0, batch_size=4, model=model, evaluate_at_end=False)
    assert e.value.epoch == 0 and e.value.step == 0


def test_rejects_zero_epochs():
    with pytest.raises(ValueError):
        train_loop(tiny32(), TINY_DATA, 0)

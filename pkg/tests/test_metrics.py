import numpy as np
import pytest

from spirdet import kernels
from spirdet.metrics import connected_components, detection_metrics, evaluate_image

from conftest import flood_fill_labels


def img(h, w, pixels):
    a = np.zeros((h, w))
    for y, x in pixels:
        a[y, x] = 1
    return a


def block(y0, x0, y1, x1):
    return [(y, x) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


# -------------------------------------------------------- components


def test_diagonal_pixels_join(backend):
    comps = connected_components(img(4, 4, [(1, 1), (2, 2)]))
    assert len(comps) == 1 and comps[0].area == 2
    assert comps[0].centroid == (1.5, 1.5)


def test_empty_mask(backend):
    assert connected_components(np.zeros((5, 5))) == []


def test_non_binary_mask_rejected():
    with pytest.raises(ValueError):
        connected_components(np.full((3, 3), 2))


def _as_sets(labels, n):
    return sorted(frozenset(map(tuple, np.argwhere(labels == k).tolist())) for k in range(1, n + 1))


@pytest.mark.parametrize("density", [0.1, 0.3, 0.5, 0.7])
def test_flood_fill_oracle(backend, density):
    r = np.random.default_rng(int(density * 10))
    for _ in range(25):
        m = (r.random((32, 32)) < density).astype(np.uint8)
        comps = connected_components(m)
        lab, n = flood_fill_labels(m)
        assert len(comps) == n
        got = sorted(frozenset(map(tuple, c.pixels.tolist())) for c in comps)
        assert got == _as_sets(lab, n)
        # components come out in raster order of their first pixel, same as the oracle's seeds
        for k, c in enumerate(comps, 1):
            assert tuple(c.pixels[0]) == tuple(np.argwhere(lab == k)[0])


def test_label_backends_agree():
    r = np.random.default_rng(9)
    for _ in range(20):
        m = r.random((40, 33)) < 0.45
        a, na = kernels.label8_numba(m)
        b, nb = kernels.label8_numpy(m)
        assert na == nb
        assert _as_sets(a, na) == _as_sets(b, nb)


# ----------------------------------------------------------- crafted cases
# each entry: (pred pixels, gt pixels, size, pd, fa numerator, intersection, union)

CRAFTED = [
    ("16x16 one target plus stray pixel", block(4, 4, 5, 5) + [(12, 12)], block(4, 4, 5, 5) + [], 16, 1.0, 1, 4, 5),
    ("exact match", block(2, 2, 3, 4), block(2, 2, 3, 4), 8, 1.0, 0, 6, 6),
    ("diagonal pred is one component", [(2, 2), (3, 3), (4, 4)], [(3, 3)], 8, 1.0, 0, 1, 3),
    ("diagonal gt is one target", [(3, 3)], [(2, 2), (3, 3), (4, 4)], 8, 1.0, 0, 1, 3),
    ("missed target", [], block(1, 1, 2, 2), 8, 0.0, 0, 0, 4),
    ("two targets one found", block(1, 1, 2, 2), block(1, 1, 2, 2) + block(6, 6, 7, 7), 10, 0.5, 0, 4, 8),
    ("offset within 3 px", block(4, 6, 5, 7), block(4, 4, 5, 5), 10, 1.0, 0, 0, 8),
    ("offset beyond 3 px", block(4, 8, 5, 9), block(4, 4, 5, 5), 12, 0.0, 4, 0, 8),
    ("stray pixels only", [(0, 0), (7, 7), (0, 7)], [], 8, 1.0, 3, 0, 3),
    ("one pred, two nearby targets", block(3, 3, 4, 4), [(3, 2), (4, 5)], 10, 0.5, 0, 0, 6),
    ("large false blob", block(0, 0, 3, 3), [(7, 7)], 8, 0.0, 16, 0, 17),
    ("both empty", [], [], 6, 1.0, 0, 0, 0),
]


@pytest.mark.parametrize("case", CRAFTED, ids=[c[0] for c in CRAFTED])
def test_crafted_images(case):
    _, pred, gt, n, pd, fa_px, inter, union = case
    rep = detection_metrics([img(n, n, pred) * 0.9], [img(n, n, gt)])
    assert rep.pd == pytest.approx(pd)
    assert rep.false_pixels == fa_px
    assert rep.fa == pytest.approx(fa_px / (n * n))
    assert rep.miou == pytest.approx(inter / union if union else 1.0)


def test_sixteen_pixel_grid_values():
    gt = img(16, 16, block(4, 4, 5, 5))
    pred = img(16, 16, block(4, 4, 5, 5) + [(12, 12)])
    rep = detection_metrics([pred], [gt])
    assert (rep.pd, rep.fa, rep.miou) == (1.0, 1 / 256, pytest.approx(0.8))


def test_identity_and_empty_predictions(rng):
    gts = [(rng.random((16, 16)) < 0.05).astype(float) for _ in range(4)]
    gts[0][3, 3] = 1
    rep = detection_metrics(gts, gts)
    assert (rep.pd, rep.fa, rep.miou) == (1.0, 0.0, 1.0)
    rep = detection_metrics([np.zeros((16, 16))] * 4, gts)
    assert (rep.pd, rep.fa, rep.miou) == (0.0, 0.0, 0.0)


def test_global_vs_per_image_miou():
    g1, p1 = img(4, 4, block(0, 0, 1, 1)), img(4, 4, block(0, 0, 1, 0))     # 2/4
    g2, p2 = img(4, 4, [(3, 3)]), img(4, 4, [(3, 3)])                       # 1/1
    rep = detection_metrics([p1, p2], [g1, g2])
    assert rep.miou == pytest.approx(3 / 5)
    rep = detection_metrics([p1, p2, np.zeros((4, 4))], [g1, g2, np.zeros((4, 4))], miou_mode="per_image")
    assert rep.miou == pytest.approx((0.5 + 1 + 1) / 3)


def test_order_invariance(rng):
    preds = [rng.random((16, 16)) for _ in range(6)]
    gts = [(rng.random((16, 16)) < 0.05).astype(float) for _ in range(6)]
    a = detection_metrics(preds, gts).as_dict()
    perm = rng.permutation(6)
    b = detection_metrics([preds[i] for i in perm], [gts[i] for i in perm]).as_dict()
    assert a == pytest.approx(b)


def test_threshold_invariance_when_binarization_unchanged(rng):
    gt = img(16, 16, block(3, 3, 4, 4) + [(10, 12)])
    pred = np.where(img(16, 16, block(3, 3, 4, 5) + [(14, 1)]) > 0, 0.9, 0.1)
    a = detection_metrics([pred], [gt], threshold=0.5)
    b = detection_metrics([pred], [gt], threshold=0.3)
    assert (a.pd, a.miou, a.fa) == (b.pd, b.miou, b.fa)


def test_greedy_matching_prefers_closest():
    gt = img(12, 12, [(5, 5)])
    pred = img(12, 12, [(5, 7), (5, 4)])
    r = evaluate_image(pred, gt)
    (gi, pi), = r.matches
    assert r.pred_components[pi].centroid == (5.0, 4.0)
    assert r.false_pixels == 1


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        detection_metrics([np.zeros((4, 4))], [])
    with pytest.raises(ValueError):
        detection_metrics([np.zeros((4, 4))], [np.zeros((4, 4))], miou_mode="mean")

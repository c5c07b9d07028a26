"""Pixel- and object-level detection metrics (MIoU, Pd, Fa)."""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .kernels import label8
from .tensor_ops import ShapeError


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray      # (n, 2) row/col coordinates in raster order
    centroid: Tuple[float, float]

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass
class ImageResult:
    pred_components: List[Component]
    gt_components: List[Component]
    matches: List[Tuple[int, int]]      # (gt index, pred index)
    false_pixels: int
    intersection: int
    union: int


@dataclass
class DetectionReport:
    miou: float
    pd: float
    fa: float
    total_targets: int
    matched_targets: int
    false_pixels: int
    total_pixels: int
    images: List[ImageResult] = field(default_factory=list, repr=False)

    def as_dict(self):
        return {"miou": self.miou, "pd": self.pd, "fa": self.fa, "total_targets": self.total_targets,
                "matched_targets": self.matched_targets, "false_pixels": self.false_pixels,
                "total_pixels": self.total_pixels}


def _plane(x) -> np.ndarray:
    a = np.asarray(x)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a single-channel 2-D map, got {np.shape(x)}")
    return a


def connected_components(mask) -> List[Component]:
    """8-connected components ordered by their first pixel in raster order."""
    m = _plane(mask)
    if m.size and not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    labels, n = label8(m.astype(bool))
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    starts = np.cumsum(counts)
    w = m.shape[1]
    comps = []
    for lab in range(1, n + 1):
        idx = order[starts[lab - 1]:starts[lab]]
        pix = np.stack([idx // w, idx % w], axis=1)
        comps.append(Component(pix, (float(pix[:, 0].mean()), float(pix[:, 1].mean()))))
    return comps


def match_components(gt_comps, pred_comps, match_dist: float):
    """Greedy one-to-one matching, closest centroid pairs first.

    Ties are broken by ground-truth index, then prediction index.
    """
    pairs = []
    for gi, g in enumerate(gt_comps):
        for pi, p in enumerate(pred_comps):
            d = float(np.hypot(g.centroid[0] - p.centroid[0], g.centroid[1] - p.centroid[1]))
            if d <= match_dist:
                pairs.append((d, gi, pi))
    pairs.sort()
    used_g, used_p, out = set(), set(), []
    for _, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((gi, pi))
    return sorted(out)


def evaluate_image(pred, gt, threshold: float = 0.5, match_dist: float = 3.0) -> ImageResult:
    p = _plane(pred) > threshold
    g = _plane(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    g = g.astype(bool)
    pc = connected_components(p.astype(np.uint8))
    gc = connected_components(g.astype(np.uint8))
    matches = match_components(gc, pc, match_dist)
    matched_pred = {pi for _, pi in matches}
    false_px = sum(c.area for i, c in enumerate(pc) if i not in matched_pred)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return ImageResult(pc, gc, matches, false_px, inter, union)


def detection_metrics(preds: Sequence, gts: Sequence, threshold: float = 0.5, match_dist: float = 3.0,
                      miou_mode: str = "global") -> DetectionReport:
    """Score probability maps against binary masks.

    A false-alarm pixel belongs to a predicted component that matched no
    target.  ``miou_mode`` is ``"global"`` (summed intersections over summed
    unions) or ``"per_image"`` (mean of per-image IoU; empty/empty scores 1).
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if miou_mode not in ("global", "per_image"):
        raise ValueError(f"unknown miou mode {miou_mode!r}")
    results = [evaluate_image(p, g, threshold, match_dist) for p, g in zip(preds, gts)]
    total_t = sum(len(r.gt_components) for r in results)
    matched = sum(len(r.matches) for r in results)
    false_px = sum(r.false_pixels for r in results)
    total_px = sum(_plane(g).size for g in gts)
    if miou_mode == "global":
        inter = sum(r.intersection for r in results)
        union = sum(r.union for r in results)
        miou = inter / union if union else 1.0
    else:
        ious = [r.intersection / r.union if r.union else 1.0 for r in results]
        miou = float(np.mean(ious)) if ious else 1.0
    pd = matched / total_t if total_t else 1.0
    fa = false_px / total_px if total_px else 0.0
    return DetectionReport(float(miou), float(pd), float(fa), total_t, matched, false_px, total_px, results)

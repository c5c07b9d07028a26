"""SoftIoU objectives and the composite training loss."""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .ortho import concat_filters, ortho_penalty
from .tensor_ops import ShapeError, maxpool2d

SOFT_IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    output_loss: float
    sparse_loss: float
    orth_loss: float

    @property
    def total(self) -> float:
        return self.output_loss + self.sparse_loss + self.orth_loss

    def as_dict(self):
        return {"output_loss": self.output_loss, "sparse_loss": self.sparse_loss,
                "orth_loss": self.orth_loss, "total": self.total}


def _check_binary(target):
    t = np.asarray(target)
    if t.size and not np.all((t == 0) | (t == 1)):
        raise ValueError("target must be binary (entries 0 or 1)")
    return t


def soft_iou_loss(pred, target, eps: float = SOFT_IOU_EPS) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = _check_binary(target).astype(np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    inter = float((pred * target).sum())
    union = float(pred.sum() + target.sum()) - inter
    return 1.0 - (inter + eps) / (union + eps)


def _as_batch(gt):
    """Accept ``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)`` ground truth."""
    g = np.asarray(gt)
    if g.ndim == 2:
        return g[None, None]
    if g.ndim == 3:
        return g[:, None] if g.shape[0] != 1 else g[None]
    if g.ndim == 4:
        return g
    raise ShapeError(f"ground truth must have 2-4 dims, got {g.shape}")


def coarse_gt(gt, ratio: int) -> np.ndarray:
    """Window maximum with kernel = stride = ``ratio``; keeps the input rank."""
    g = np.asarray(gt)
    out = maxpool2d(_as_batch(g), ratio, ratio)
    return out.reshape(g.shape[:-2] + out.shape[-2:])


def orth_terms(model, tape=None):
    """Autograd ortho penalties of every downsampling bank."""
    tape = tape or ag.NoTape()
    terms = []
    for bank in model.downsampling_banks():
        k, o = bank.shape[:2]
        f = ag.reshape(tape.var(bank), (k * o, -1))
        terms.append(ag.ortho_penalty(f))
    return terms


def bank_penalties(model):
    """Plain-float penalty per downsampling bank (float64 evaluation)."""
    return [ortho_penalty(concat_filters(b.astype(np.float64))) for b in model.downsampling_banks()]


def objective(o, v, gt, model, tape=None, use_orth: bool = True, eps: float = SOFT_IOU_EPS):
    """Composite loss as an autograd value plus its :class:`LossBreakdown`.

    ``o`` and ``v`` are the fine output and coarse map (autograd values or
    arrays); ``gt`` is the full-resolution binary mask batch.
    """
    g = _as_batch(_check_binary(gt))
    o, v = ag.const(o), ag.const(v)
    if o.shape != g.shape:
        raise ShapeError(f"output {o.shape} vs ground truth {g.shape}")
    gc = maxpool2d(g, model.config.coarse_ratio, model.config.coarse_ratio)
    if v.shape != gc.shape:
        raise ShapeError(f"coarse map {v.shape} vs coarse ground truth {gc.shape}")
    l_out = ag.soft_iou_loss(o, g, eps)
    l_sp = ag.soft_iou_loss(v, gc, eps)
    parts = [l_out, l_sp]
    orth = 0.0
    if use_orth and not model.fused:
        terms = orth_terms(model, tape)
        parts += terms
        orth = float(sum(float(t.data) for t in terms))
    total = ag.add(*parts)
    return total, LossBreakdown(float(l_out.data), float(l_sp.data), orth)


def total_loss(O, V, gt, model, eps: float = SOFT_IOU_EPS) -> LossBreakdown:
    g = _as_batch(_check_binary(gt))
    O = np.asarray(O).reshape(g.shape)
    gc = coarse_gt(g, model.config.coarse_ratio)
    V = np.asarray(V).reshape(gc.shape)
    orth = 0.0 if model.fused else float(sum(bank_penalties(model)))
    return LossBreakdown(soft_iou_loss(O, g, eps), soft_iou_loss(V, gc, eps), orth)

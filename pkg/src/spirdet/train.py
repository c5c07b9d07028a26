"""Optimizer, learning-rate schedule, synthetic data and the training loop."""
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .backbone import SpirDetModel, build_model, model_forward, named_parameters, predict
from .config import ModelConfig
from .losses import LossBreakdown, bank_penalties, objective
from .metrics import DetectionReport, detection_metrics

LR_MAX = 0.0015
LR_MIN = 0.0005
WEIGHT_DECAY = 0.05


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch, step, breakdown):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {breakdown}")
        self.epoch, self.step, self.breakdown = epoch, step, breakdown


# ------------------------------------------------------------ parameters


class ParameterStore:
    """Named trainable arrays of a model, with one gradient slot each.

    The arrays are the model's own buffers, so updates land in the model.
    """

    def __init__(self, model: SpirDetModel):
        named = named_parameters(model)
        names = [n for n, _ in named]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.names = names
        self.params = [a for _, a in named]
        self.grads = [np.zeros_like(a) for a in self.params]

    def __len__(self):
        return len(self.params)

    def items(self):
        return zip(self.names, self.params)

    def tape(self) -> ag.Tape:
        return ag.Tape(self.params)

    def collect(self, tape: ag.Tape):
        """Copy gradients off ``tape``; parameters it never reached get zero."""
        for i, p in enumerate(self.params):
            g = tape.grad_of(p)
            self.grads[i] = np.zeros_like(p) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0


def decays(param: np.ndarray) -> bool:
    """Weight decay touches convolution kernels only."""
    return param.ndim >= 4


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = WEIGHT_DECAY
    step_count: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def step(self, store: ParameterStore, lr: float):
        if not self.m:
            self.m = [np.zeros_like(p) for p in store.params]
            self.v = [np.zeros_like(p) for p in store.params]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(store.params, store.grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and decays(p):
                p *= 1.0 - lr * self.weight_decay
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)


def adamw_step(store: ParameterStore, state: AdamW, lr: float) -> AdamW:
    state.step(store, lr)
    return state


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN


def cosine_lr(t: int, sched: Schedule) -> float:
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    frac = t / sched.total_steps if sched.total_steps else 0.0
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------- synthetic data


@dataclass
class SyntheticSample:
    image: np.ndarray   # (1, H, W) float32 in [0, 1]
    mask: np.ndarray    # (1, H, W) uint8
    seed: object


MAX_TARGET_FRACTION = 0.003
_HALF_RADIUS = math.sqrt(2.0 * math.log(2.0))   # half-maximum radius in units of sigma


def _background(rng, size, clutter_level):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0, mode="wrap")
    field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-12)
    base = 0.15 + 0.25 * field_
    return base + clutter_level * 0.03 * rng.standard_normal((size, size))


def _place_centres(rng, size, n, margin, min_sep):
    centres = []
    for _ in range(200 * max(n, 1)):
        if len(centres) == n:
            break
        c = rng.integers(margin, size - margin, size=2)
        if all(np.hypot(*(c - d)) >= min_sep for d in centres):
            centres.append(c)
    if len(centres) < n:
        raise ValueError(f"could not place {n} separated targets in {size}x{size}")
    return centres


def gen_synthetic(seed, size: int = 64, n_targets: int = 2, clutter_level: float = 0.5) -> SyntheticSample:
    """Gaussian-blob targets on a smooth noisy background.

    The mask marks pixels where a blob exceeds half its peak.  Blob widths
    are capped so each mask component stays within 0.3% of the image.
    """
    if size < 32:
        raise ValueError("size must be at least 32")
    if n_targets < 0:
        raise ValueError("n_targets must be non-negative")
    rng = np.random.default_rng(seed)
    img = _background(rng, size, clutter_level)
    mask = np.zeros((size, size), dtype=bool)
    cap = MAX_TARGET_FRACTION * size * size
    sigma_hi = min(2.0, math.sqrt(cap / math.pi) / (_HALF_RADIUS + 0.5))
    yy, xx = np.mgrid[0:size, 0:size]
    for cy, cx in _place_centres(rng, size, n_targets, margin=6, min_sep=10):
        sigma = rng.uniform(0.7, max(sigma_hi, 0.7))
        y0 = cy + rng.uniform(-0.25, 0.25)
        x0 = cx + rng.uniform(-0.25, 0.25)
        amp = rng.uniform(0.25, 0.5)
        blob = amp * np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2.0 * sigma * sigma))
        img += blob
        mask |= blob > 0.5 * amp
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return SyntheticSample((img8 / 255.0).astype(np.float32)[None], mask.astype(np.uint8)[None], seed)


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 400
    n_test: int = 100
    size: int = 64
    max_targets: int = 3
    clutter_level: float = 0.5
    seed: int = 42


def make_split(spec: DatasetSpec, split: str) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked ``(N, 1, H, W)`` images and masks; train and test seeds are disjoint."""
    sid, n = {"train": (0, spec.n_train), "test": (1, spec.n_test)}[split]
    imgs, masks = [], []
    for i in range(n):
        key = (spec.seed, sid, i)
        nt = int(np.random.default_rng(key + (7,)).integers(1, spec.max_targets + 1))
        s = gen_synthetic(key, spec.size, nt, spec.clutter_level)
        imgs.append(s.image)
        masks.append(s.mask)
    shape = (0, 1, spec.size, spec.size)
    return (np.stack(imgs) if imgs else np.zeros(shape, np.float32),
            np.stack(masks) if masks else np.zeros(shape, np.uint8))


# ------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: LossBreakdown


@dataclass
class TrainResult:
    model: SpirDetModel
    history: List[EpochRecord]
    report: Optional[DetectionReport]
    bank_penalties: List[float]


def train_step(model, store, opt, x, y, lr, use_orth=True):
    tape = store.tape()
    v, o, _ = model_forward(model, x, tape, training=True)
    total, parts = objective(o, v, y, model, tape, use_orth)
    if not np.isfinite(parts.total):
        return parts, False
    total.backward()
    store.collect(tape)
    opt.step(store, lr)
    return parts, True


def evaluate(model: SpirDetModel, images, masks, batch_size: int = 25, **metric_kw) -> DetectionReport:
    preds = []
    for i in range(0, len(images), batch_size):
        _, o = predict(model, images[i:i + batch_size])
        preds.extend(o)
    return detection_metrics(preds, list(masks), **metric_kw)


def write_history_csv(history: Sequence[EpochRecord], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "output_loss", "sparse_loss", "orth_loss", "total"])
        for r in history:
            d = r.losses
            w.writerow([r.epoch, f"{r.lr:.8g}", f"{d.output_loss:.8g}", f"{d.sparse_loss:.8g}",
                        f"{d.orth_loss:.8g}", f"{d.total:.8g}"])


def train_loop(config: ModelConfig, data: DatasetSpec, epochs: int, seed: int = 42, batch_size: int = 16,
               use_orth: bool = True, lr_max: float = LR_MAX, lr_min: float = LR_MIN,
               weight_decay: float = WEIGHT_DECAY, evaluate_at_end: bool = True, log_path=None,
               on_epoch: Optional[Callable[[EpochRecord], None]] = None, model: SpirDetModel = None) -> TrainResult:
    """Deterministic minibatch training on a synthetic split.

    The learning rate follows a cosine from ``lr_max`` to ``lr_min`` over all
    optimizer steps.  Each epoch records the mean of every loss term.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x_tr, y_tr = make_split(data, "train")
    if model is None:
        model = build_model(config, seed)
    store = ParameterStore(model)
    opt = AdamW(weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    steps_per_epoch = max(1, math.ceil(len(x_tr) / batch_size))
    sched = Schedule(max(epochs * steps_per_epoch - 1, 1), lr_max, lr_min)
    history, step = [], 0
    for epoch in range(epochs):
        perm = rng.permutation(len(x_tr))
        sums = np.zeros(3)
        lr = cosine_lr(min(step, sched.total_steps), sched)
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * batch_size:(b + 1) * batch_size])
            lr = cosine_lr(min(step, sched.total_steps), sched)
            parts, ok = train_step(model, store, opt, x_tr[idx], y_tr[idx], lr, use_orth)
            if not ok:
                raise TrainingDivergence(epoch, step, parts)
            sums += (parts.output_loss, parts.sparse_loss, parts.orth_loss)
            step += 1
        rec = EpochRecord(epoch, lr, LossBreakdown(*(float(s) for s in sums / steps_per_epoch)))
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    if log_path:
        write_history_csv(history, log_path)
    report = None
    if evaluate_at_end and data.n_test:
        x_te, y_te = make_split(data, "test")
        report = evaluate(model, x_te, y_te)
    return TrainResult(model, history, report, bank_penalties(model))

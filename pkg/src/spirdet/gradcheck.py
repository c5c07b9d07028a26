"""Finite-difference verification of every adjoint and of the full objective.

Each check compares the analytic directional derivative ``<grad, d>`` with a
central difference along the same random direction ``d``, in float64.  A
sample is redrawn whenever any discrete decision (ReLU sign, max position,
TOP-K set) differs between ``x - h d``, ``x`` and ``x + h d``, so kinks are
never straddled.
"""
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import autograd as ag
from .config import ModelConfig
from .dbsd import ActiveSiteIndex

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_err: float
    redraws: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.points > 0 and self.max_rel_err <= self.tol


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _scalar(out: ag.Var, weights: np.ndarray) -> float:
    return float((out.data * weights).sum())


def directional_check(name: str, make_case: Callable, rng, points: int = 10, h: float = 1e-6,
                      tol: float = DEFAULT_TOL, max_redraws: int = 200) -> CheckResult:
    """``make_case(rng) -> (fn, arrays, diff)``: ``fn(*vars) -> Var``; ``diff`` flags
    which positional arrays are differentiated."""
    worst, done, redraws = 0.0, 0, 0
    while done < points:
        if redraws > max_redraws:
            break
        fn, arrays, diff = make_case(rng)
        arrays = [np.asarray(a, dtype=np.float64) if d else a for a, d in zip(arrays, diff)]
        dirs = [rng.standard_normal(a.shape) if d else None for a, d in zip(arrays, diff)]

        with ag.record_branches() as base_log:
            leaves = [ag.Var(a, requires_grad=True) if d else a for a, d in zip(arrays, diff)]
            out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        out.backward(weights.astype(out.dtype))
        analytic = sum(float((l.grad * dv).sum()) for l, dv, d in zip(leaves, dirs, diff)
                       if d and l.grad is not None)

        def shifted(sign):
            moved = [a + sign * h * dv if d else a for a, dv, d in zip(arrays, dirs, diff)]
            with ag.record_branches() as log:
                val = _scalar(fn(*moved), weights)
            return val, log

        fp, log_p = shifted(+1)
        fm, log_m = shifted(-1)
        if log_p != base_log or log_m != base_log:
            redraws += 1
            continue
        worst = max(worst, rel_err(analytic, (fp - fm) / (2 * h)))
        done += 1
    return CheckResult(name, done, worst, redraws, tol)


# ------------------------------------------------------------------ cases


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _distinct(rng, shape):
    """Values whose window maxima are separated well above any test step."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n * 4.0 - 2.0)


def _active_index(rng, B, H, W, n):
    flat = rng.choice(B * H * W, size=n, replace=False)
    b, rem = np.divmod(flat, H * W)
    i, j = np.divmod(rem, W)
    return ActiveSiteIndex.from_sites(np.stack([i, j], 1), (B, H, W), batch=b)


def op_cases():
    """Name -> case factory for every differentiable op."""
    def c_add(r):
        s = (2, 3, 4, 4)
        return (lambda a, b, c: ag.add(a, b, c)), [r.standard_normal(s) for _ in range(3)], [True] * 3

    def c_scale(r):
        return (lambda a: ag.scale(a, 0.7)), [r.standard_normal((2, 3, 5))], [True]

    def c_relu(r):
        return ag.relu, [_away_from_zero(r, (2, 3, 6, 6))], [True]

    def c_sigmoid(r):
        return ag.sigmoid, [3 * r.standard_normal((2, 3, 6, 6))], [True]

    def c_reshape(r):
        return (lambda a: ag.transpose(ag.reshape(a, (6, 8)), (1, 0))), [r.standard_normal((2, 3, 8))], [True]

    def c_sum(r):
        return (lambda a: ag.sum_axis(a, 1)), [r.standard_normal((2, 4, 3, 3))], [True]

    def c_total(r):
        return ag.total, [r.standard_normal((2, 4, 3))], [True]

    def c_concat(r):
        return (lambda a, b: ag.concat([a, b], axis=1)), [r.standard_normal((2, 2, 3, 3)),
                                                          r.standard_normal((2, 3, 3, 3))], [True, True]

    def c_stack(r):
        return (lambda a, b: ag.stack([a, b], axis=0)), [r.standard_normal((3, 4)), r.standard_normal((3, 4))], [True] * 2

    def c_tile(r):
        return (lambda a: ag.tile_channels(a, 3)), [r.standard_normal((2, 2, 4, 4))], [True]

    def c_affine(r):
        return ag.channel_affine, [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)], [True] * 3

    def c_bn_train(r):
        C = 3
        fn = lambda x, g, b: ag.batch_norm(x, g, b, np.zeros(C), np.ones(C), 1e-5, True)
        return fn, [r.standard_normal((3, C, 4, 4)) * 2 + 1, r.uniform(0.5, 1.5, C), r.standard_normal(C)], [True] * 3

    def c_bn_eval(r):
        C = 3
        rm, rv = r.standard_normal(C), r.uniform(0.5, 2.0, C)
        fn = lambda x, g, b: ag.batch_norm(x, g, b, rm, rv, 1e-5, False)
        return fn, [r.standard_normal((2, C, 4, 4)), r.uniform(0.5, 1.5, C), r.standard_normal(C)], [True] * 3

    def conv_case(cin, cout, k, stride, pad, groups, size=7):
        def case(r):
            fn = lambda x, w, b: ag.conv2d(x, w, b, stride, pad, groups)
            return fn, [r.standard_normal((2, cin, size, size)), r.standard_normal((cout, cin // groups, k, k)),
                        r.standard_normal(cout)], [True] * 3
        return case

    def c_upsample(r):
        return (lambda x: ag.upsample_bilinear(x, 2)), [r.standard_normal((2, 2, 4, 5))], [True]

    def c_maxpool(r):
        return (lambda x: ag.maxpool(x, 2)), [_distinct(r, (2, 2, 6, 6))], [True]

    def c_slice(r):
        return (lambda x: ag.slice_channels(x, 1, 3)), [r.standard_normal((2, 4, 3, 3))], [True]

    def c_gather(r):
        B, C, H, W, O = 2, 3, 6, 6, 4
        idx = _active_index(r, B, H, W, 9)
        fn = lambda x, w, b: ag.sparse_gather_conv(x, idx.batch, idx.ii, idx.jj, w, b, 1, 1)
        return fn, [r.standard_normal((B, C, H, W)), r.standard_normal((O, C, 3, 3)), r.standard_normal(O)], [True] * 3

    def c_gather_dw(r):
        B, C, H, W = 2, 3, 6, 6
        idx = _active_index(r, B, H, W, 9)
        fn = lambda x, w, b: ag.sparse_gather_conv(x, idx.batch, idx.ii, idx.jj, w, b, 1, C)
        return fn, [r.standard_normal((B, C, H, W)), r.standard_normal((C, 1, 3, 3)), r.standard_normal(C)], [True] * 3

    def sub_case(k, groups, cin=3, cout=3):
        def case(r):
            idx = _active_index(r, 2, 6, 6, 14)
            nbr = idx.neighbours(k)
            fn = lambda f, w, b: ag.sparse_submanifold_conv(f, nbr, w, b, groups)
            return fn, [r.standard_normal((len(idx), cin)), r.standard_normal((cout, cin // groups, k, k)),
                        r.standard_normal(cout)], [True] * 3
        return case

    def c_scatter(r):
        idx = _active_index(r, 2, 5, 5, 7)
        fn = lambda f: ag.scatter_sites(f, idx.batch, idx.ii, idx.jj, (2, 3, 5, 5))
        return fn, [r.standard_normal((7, 3))], [True]

    def c_soft_iou(r):
        tgt = (r.random((2, 1, 6, 6)) < 0.2).astype(np.float64)
        return (lambda p: ag.soft_iou_loss(p, tgt)), [r.uniform(0.05, 0.95, (2, 1, 6, 6))], [True]

    def c_ortho(r):
        return ag.ortho_penalty, [r.standard_normal((6, 10)) * 0.3], [True]

    return {
        "add": c_add, "scale": c_scale, "relu": c_relu, "sigmoid": c_sigmoid, "reshape_transpose": c_reshape,
        "sum_axis": c_sum, "total": c_total, "concat": c_concat, "stack": c_stack, "tile_channels": c_tile,
        "channel_affine": c_affine, "batch_norm_train": c_bn_train, "batch_norm_eval": c_bn_eval,
        "conv2d_3x3": conv_case(3, 4, 3, 1, 1, 1), "conv2d_3x3_stride2": conv_case(3, 4, 3, 2, 1, 1),
        "conv2d_1x1": conv_case(3, 5, 1, 1, 0, 1), "conv2d_depthwise": conv_case(4, 4, 3, 1, 1, 4),
        "conv2d_depthwise_stride2": conv_case(4, 4, 3, 2, 1, 4), "conv2d_grouped": conv_case(4, 8, 3, 1, 1, 2),
        "upsample_bilinear": c_upsample, "maxpool": c_maxpool, "slice_channels": c_slice,
        "sparse_gather_conv": c_gather, "sparse_gather_conv_depthwise": c_gather_dw,
        "sparse_submanifold_conv_3x3": sub_case(3, 1), "sparse_submanifold_conv_depthwise": sub_case(3, 3),
        "sparse_submanifold_conv_1x1": sub_case(1, 1, 3, 5), "scatter_sites": c_scatter,
        "soft_iou_loss": c_soft_iou, "ortho_penalty": c_ortho,
    }


def tiny_config() -> ModelConfig:
    return ModelConfig(variant="custom", blocks_per_stage=(1, 1, 1), channels_per_stage=(2, 4, 4), K=2,
                       alpha=0.25, sparse_convs=2, input_size=(16, 16), coarse_ratio=4, fine_ratio=2)


def objective_case(config: ModelConfig = None, batch: int = 2, use_orth: bool = True):
    """Case factory for the full composite loss over every model parameter."""
    from .backbone import build_model, named_parameters, randomize_bn
    from .losses import objective

    config = config or tiny_config()

    def case(r):
        model = build_model(config, int(r.integers(1 << 30)), dtype=np.float64)
        randomize_bn(model, int(r.integers(1 << 30)))
        params = [a for _, a in named_parameters(model)]
        H, W = config.input_size
        x = r.random((batch, 1, H, W))
        gt = (r.random((batch, 1, H, W)) < 0.05).astype(np.float64)

        def fn(*ps):
            from .backbone import model_forward

            originals = [p.copy() for p in params]
            tape = ag.Tape()
            for p, v in zip(params, ps):
                if isinstance(v, ag.Var):
                    tape.leaves[id(p)] = v
                    p[...] = v.data
                else:
                    p[...] = v
            try:
                v_, o_, _ = model_forward(model, x, tape, training=True)
                total, _ = objective(o_, v_, gt, model, tape, use_orth)
            finally:
                for p, orig in zip(params, originals):
                    p[...] = orig
            return total

        return fn, [p.copy() for p in params], [True] * len(params)

    return case


def run_suite(seed: int = 0, points: int = 10, tol: float = DEFAULT_TOL, names: Sequence[str] = None,
              include_objective: bool = True) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = op_cases()
    if include_objective:
        cases["objective"] = objective_case()
    out = []
    for name, case in cases.items():
        if names and name not in names:
            continue
        out.append(directional_check(name, case, rng, points=points, tol=tol))
    return out

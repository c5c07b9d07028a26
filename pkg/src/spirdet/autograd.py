"""Minimal reverse-mode differentiation over numpy arrays.

Every op takes ``Var`` or plain arrays and returns a ``Var``.  A graph node is
only recorded when at least one input requires a gradient, so the same model
code serves inference (no recording) and training.

Ops without an adjoint raise :class:`UnsupportedOpError` during ``backward``.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels
from .tensor_ops import bilinear_matrix


class UnsupportedOpError(RuntimeError):
    """Backward reached an op that has no adjoint."""


class Var:
    __slots__ = ("data", "grad", "requires_grad", "parents", "adjoint", "op", "extra")

    def __init__(self, data, requires_grad=False, parents=(), adjoint=None, op="leaf"):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.adjoint = adjoint
        self.op = op
        self.extra = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node.adjoint is None:
                raise UnsupportedOpError(f"no adjoint defined for op {node.op!r}")
            pgrads = node.adjoint(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def const(x):
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _wrap(*xs):
    return [const(x) for x in xs]


def _node(data, parents, adjoint, op):
    if any(p.requires_grad for p in parents):
        return Var(data, True, tuple(parents), adjoint, op)
    return Var(data, op=op)


class Tape:
    """Maps parameter arrays (by identity) to gradient-tracking leaves."""

    def __init__(self, arrays=()):
        self.leaves = {}
        for a in arrays:
            self.watch(a)

    def watch(self, array):
        leaf = Var(array, requires_grad=True)
        self.leaves[id(array)] = leaf
        return leaf

    def var(self, array):
        if array is None:
            return None
        if isinstance(array, Var):
            return array
        leaf = self.leaves.get(id(array))
        return leaf if leaf is not None else Var(array)

    def grad_of(self, array):
        leaf = self.leaves.get(id(array))
        if leaf is None or leaf.grad is None:
            return np.zeros_like(array)
        return leaf.grad


class NoTape(Tape):
    """Inference: every parameter is a constant."""

    def watch(self, array):  # pragma: no cover - not used
        return Var(array)

    def var(self, array):
        if array is None or isinstance(array, Var):
            return array
        return Var(array)


# ------------------------------------------------------- branch recording

_branch_log = None


@contextmanager
def record_branches():
    """Collect every discrete decision (ReLU signs, max positions, TOP-K sets)
    made inside the block, so finite-difference checks can detect kinks."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(tag, decision):
    if _branch_log is not None:
        _branch_log.append((tag, np.asarray(decision).tobytes()))


# -------------------------------------------------------------- elementwise


def add(*xs):
    xs = _wrap(*xs)
    out = xs[0].data.copy()
    for x in xs[1:]:
        out = out + x.data
    return _node(out, xs, lambda g: [g] * len(xs), "add")


def scale(x, c):
    x = const(x)
    return _node(x.data * c, [x], lambda g: [g * c], "scale")


def relu(x):
    x = const(x)
    mask = x.data > 0
    note_branch("relu", mask)
    return _node(np.maximum(x.data, 0), [x], lambda g: [g * mask], "relu")


def sigmoid(x):
    from .tensor_ops import sigmoid as _sig

    x = const(x)
    s = _sig(x.data)
    return _node(s, [x], lambda g: [g * s * (1 - s)], "sigmoid")


def reshape(x, shape):
    x = const(x)
    old = x.shape
    return _node(x.data.reshape(shape), [x], lambda g: [g.reshape(old)], "reshape")


def transpose(x, axes):
    x = const(x)
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), [x], lambda g: [g.transpose(inv)], "transpose")


def sum_axis(x, axis):
    x = const(x)
    shape = x.shape
    return _node(x.data.sum(axis=axis), [x], lambda g: [np.broadcast_to(np.expand_dims(g, axis), shape).copy()], "sum")


def total(x):
    x = const(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), [x], lambda g: [np.full(shape, g, dtype=x.dtype)], "total")


def concat(xs, axis=1):
    xs = _wrap(*xs)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: np.split(g, sizes, axis=axis), "concat")


def stack(xs, axis=0):
    xs = _wrap(*xs)
    n = len(xs)
    return _node(np.stack([x.data for x in xs], axis=axis), xs,
                 lambda g: [np.take(g, i, axis=axis) for i in range(n)], "stack")


def tile_channels(x, k):
    """``(B, C, H, W) -> (B, k*C, H, W)`` with the copies laid out branch-major."""
    x = const(x)
    B, C = x.shape[:2]

    def adj(g):
        return [g.reshape(B, k, C, *g.shape[2:]).sum(axis=1)]

    return _node(np.tile(x.data, (1, k, 1, 1)), [x], adj, "tile")


def channel_affine(x, scale_, shift):
    """``x * scale + shift`` with per-channel vectors on axis 1."""
    x, s, t = _wrap(x, scale_, shift)
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    out = x.data * s.data.reshape(bshape) + t.data.reshape(bshape)

    def adj(g):
        return [g * s.data.reshape(bshape), (g * x.data).sum(axis=axes), g.sum(axis=axes)]

    return _node(out, [x, s, t], adj, "affine")


# -------------------------------------------------------------- batch norm


def batch_norm(x, gamma, beta, running_mean, running_var, eps, training):
    """BN over axis 1.  In training mode uses batch statistics and stores them in
    ``out.extra = (mean, biased_var, count)`` for the caller's running update."""
    x, gamma, beta = _wrap(x, gamma, beta)
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        # eval mode: affine with gamma/beta still differentiable
        scale_v = _node(gamma.data * inv, [gamma], lambda g: [g * inv], "bn_scale")
        shift_v = _node(beta.data - running_mean * gamma.data * inv, [beta, gamma],
                        lambda g: [g, -g * running_mean * inv], "bn_shift")
        return channel_affine(x, scale_v, shift_v)
    n = x.data.size // x.data.shape[1]
    out, xhat, mean, var = kernels.bn_train_forward(x.data, gamma.data, beta.data, eps)
    inv = 1.0 / np.sqrt(var + eps)

    def adj(g):
        gx, gxhat, gsum = kernels.bn_train_backward(g, xhat, gamma.data, inv)
        return [gx.astype(x.dtype, copy=False), gxhat.astype(gamma.dtype), gsum.astype(beta.dtype)]

    node = _node(out.astype(x.dtype, copy=False), [x, gamma, beta], adj, "batch_norm")
    node.extra = (mean, var, n)
    return node


# ------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    x, w = _wrap(x, w)
    b = const(b) if b is not None else None
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    Ho, Wo = kernels.conv_out_size(H, kh, stride, pad), kernels.conv_out_size(W, kw, stride, pad)
    parents = [x, w] + ([b] if b is not None else [])
    need = any(p.requires_grad for p in parents)
    bias = b.data if b is not None else np.zeros(O, x.dtype)
    if not need:
        return Var(kernels.conv2d(x.data, w.data, bias, stride, pad, groups), op="conv2d")
    wd = w.data.astype(x.dtype, copy=False)
    if groups == 1:
        cols = kernels.im2col(x.data, kh, kw, stride, pad)
        w2 = wd.reshape(O, -1)
        out = np.matmul(w2, cols).reshape(B, O, Ho, Wo)

        def adj(g):
            g2 = g.reshape(B, O, Ho * Wo)
            gx = gw = None
            if x.requires_grad:
                gx = kernels.col2im(np.matmul(w2.T, g2), x.shape, kh, kw, stride, pad)
            if w.requires_grad:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            return [gx, gw] + ([g.sum(axis=(0, 2, 3))] if b is not None else [])
    elif Cg == 1 and O == C:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        out = kernels.conv2d(x.data, wd, np.zeros(O, x.dtype), stride, pad, groups)

        def adj(g):
            gxp, gw = kernels.depthwise_grad(xp, wd, g, stride)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            return [gx if x.requires_grad else None, gw if w.requires_grad else None] + \
                ([g.sum(axis=(0, 2, 3))] if b is not None else [])
    else:
        og = O // groups
        xs = [slice_channels(x, g * Cg, (g + 1) * Cg) for g in range(groups)]
        ws = [slice_channels(w, g * og, (g + 1) * og, axis=0) for g in range(groups)]
        out_v = concat([conv2d(xs[g], ws[g], None, stride, pad, 1) for g in range(groups)], axis=1)
        if b is not None:
            out_v = channel_affine(out_v, np.ones(O, x.dtype), b)
        return out_v
    if b is not None:
        out = out + bias[None, :, None, None]
    return _node(out, parents, adj, "conv2d")


def slice_channels(x, lo, hi, axis=1):
    x = const(x)
    shape = x.shape
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)

    def adj(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return [full]

    return _node(x.data[idx], [x], adj, "slice")


# ------------------------------------------------------- resampling / pooling


def upsample_bilinear(x, factor):
    x = const(x)
    if factor == 1:
        return x
    ah = bilinear_matrix(x.shape[2], factor, x.dtype)
    aw = bilinear_matrix(x.shape[3], factor, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    return _node(out, [x], lambda g: [np.matmul(np.matmul(ah.T, g), aw)], "upsample")


def maxpool(x, k):
    x = const(x)
    B, C, H, W = x.shape
    win = x.data.reshape(B, C, H // k, k, W // k, k)
    out = win.max(axis=(3, 5))
    if _branch_log is not None:
        note_branch("maxpool", win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, -1).argmax(-1))

    def adj(g):
        # gradient goes to the first maximal element of each window
        flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
        arg = flat.argmax(axis=-1)
        gw = np.zeros_like(flat)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return [gw.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)]

    return _node(out, [x], adj, "maxpool")


# -------------------------------------------------------------- sparse ops


def sparse_gather_conv(x, bidx, ii, jj, w, b=None, pad=1, groups=1):
    """Convolution evaluated only at sites ``(bidx, ii, jj)`` of a dense map."""
    x, w = _wrap(x, w)
    b = const(b) if b is not None else None
    O, Cg, kh, kw = w.shape
    parents = [x, w] + ([b] if b is not None else [])
    bias = b.data if b is not None else np.zeros(O, x.dtype)
    if not any(p.requires_grad for p in parents):
        return Var(kernels.sparse_gather_conv(x.data, bidx, ii, jj, w.data, bias, pad, groups), op="sparse_gather")
    cols = kernels.gather_cols(x.data, bidx, ii, jj, kh, kw, pad)
    out = kernels.apply_cols(cols, w.data, bias, groups)

    def adj(g):
        gcols, gw = _cols_adjoint(g, cols, w.data, groups, w.requires_grad)
        gx = None
        if x.requires_grad:
            B, C, H, W = x.shape
            gp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    # sites are distinct, so each tap writes distinct cells
                    gp[bidx, :, ii + ky, jj + kx] += gcols[:, :, ky * kw + kx]
            gx = gp[:, :, pad:pad + H, pad:pad + W] if pad else gp
        return [gx, gw] + ([g.sum(axis=0)] if b is not None else [])

    return _node(out, parents, adj, "sparse_gather")


def sparse_submanifold_conv(feat, nbr, w, b=None, groups=1):
    """Fixed-active-set convolution over site features ``(N, C)``.

    ``nbr[n, t]`` is the row of tap ``t``'s neighbour or -1 when inactive.  The
    tap offsets must be point-symmetric (true for odd square kernels), which
    lets the adjoint gather instead of scatter.
    """
    feat, w = _wrap(feat, w)
    b = const(b) if b is not None else None
    O = w.shape[0]
    parents = [feat, w] + ([b] if b is not None else [])
    bias = b.data if b is not None else np.zeros(O, feat.dtype)
    if not any(p.requires_grad for p in parents):
        return Var(kernels.sparse_submanifold_conv(feat.data, nbr, w.data, bias, groups), op="sparse_submanifold")
    cols = kernels.neighbour_cols(feat.data, nbr)
    out = kernels.apply_cols(cols, w.data, bias, groups)
    T = nbr.shape[1]

    def adj(g):
        gcols, gw = _cols_adjoint(g, cols, w.data, groups, w.requires_grad)
        gf = None
        if feat.requires_grad:
            N, C = feat.shape
            # site m receives tap t from site nbr[m, T-1-t]
            gpad = np.concatenate([gcols, np.zeros((1, C, T), gcols.dtype)], axis=0)
            rev = nbr[:, ::-1]
            gf = gpad[rev, :, np.arange(T)[None, :]].sum(axis=1)
        return [gf, gw] + ([g.sum(axis=0)] if b is not None else [])

    return _node(out, parents, adj, "sparse_submanifold")


def _cols_adjoint(g, cols, w, groups, want_w):
    N, C, T = cols.shape
    O, Cg = w.shape[:2]
    wf = w.reshape(O, Cg, T).astype(g.dtype, copy=False)
    if groups == 1:
        gcols = (g @ wf.reshape(O, Cg * T)).reshape(N, C, T)
        gw = (g.T @ cols.reshape(N, C * T)).reshape(w.shape) if want_w else None
    elif Cg == 1 and O == C:
        gcols = g[:, :, None] * wf[None, :, 0, :]
        gw = np.einsum("nc,nct->ct", g, cols).reshape(w.shape) if want_w else None
    else:
        og = O // groups
        gcols = np.empty_like(cols)
        gw = np.empty(w.shape, dtype=g.dtype) if want_w else None
        for k in range(groups):
            gk = g[:, k * og:(k + 1) * og]
            ck = cols[:, k * Cg:(k + 1) * Cg].reshape(N, Cg * T)
            gcols[:, k * Cg:(k + 1) * Cg] = (gk @ wf[k * og:(k + 1) * og].reshape(og, Cg * T)).reshape(N, Cg, T)
            if want_w:
                gw[k * og:(k + 1) * og] = (gk.T @ ck).reshape(og, Cg, *w.shape[2:])
    return gcols, gw


def scatter_sites(feat, bidx, ii, jj, shape):
    """Place site features ``(N, C)`` into a zero dense map of ``shape`` (B, C, H, W)."""
    feat = const(feat)
    out = np.zeros(shape, dtype=feat.dtype)
    out[bidx, :, ii, jj] = feat.data
    return _node(out, [feat], lambda g: [g[bidx, :, ii, jj]], "scatter")


# ------------------------------------------------------------------ losses


def soft_iou_loss(pred, target, eps=1e-6):
    """``1 - (sum p*g + eps) / (sum p + sum g - sum p*g + eps)``; target is constant."""
    pred = const(pred)
    t = np.asarray(target.data if isinstance(target, Var) else target, dtype=pred.dtype)
    inter = float((pred.data * t).sum())
    union = float(pred.data.sum() + t.sum()) - inter
    num, den = inter + eps, union + eps
    loss = 1.0 - num / den

    def adj(g):
        # d num/dp = t ; d den/dp = 1 - t
        return [(-(t * den - num * (1.0 - t)) / (den * den) * g).astype(pred.dtype, copy=False)]

    return _node(np.asarray(loss, dtype=pred.dtype), [pred], adj, "soft_iou")


def ortho_penalty(f):
    """``||F F^T - I||_F^2`` for a filter matrix with one filter per row."""
    f = const(f)
    gram = f.data @ f.data.T
    gram[np.diag_indices_from(gram)] -= 1.0
    val = np.asarray((gram * gram).sum(), dtype=f.dtype)
    return _node(val, [f], lambda g: [4.0 * g * (gram @ f.data)], "ortho")

"""Hot numeric kernels with a numba path and a pure-numpy path.

Every public kernel here dispatches on :data:`spirdet._backend.USE_NUMBA`.  Both
implementations are importable directly (``*_numba`` / ``*_numpy``) so that the
benchmark harness and the tests can compare them in one process.

The numba convolution kernels accumulate every output element in the fixed
order ``bias + sum_ic sum_ky sum_kx``.  Dense groups=1 convolutions are routed
to im2col + BLAS on both backends because sgemm beats any direct loop nest.
"""
import numpy as np

from . import _backend
from ._backend import njit


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- dense conv


@njit
def _conv2d_nb(xp, w, b, stride, groups, out):
    # xp is already zero-padded, so every tap is in bounds
    B = xp.shape[0]
    O, Cg, kh, kw = w.shape
    Ho = out.shape[2]
    Wo = out.shape[3]
    og = O // groups
    for n in range(B):
        for oc in range(O):
            g = oc // og
            for oy in range(Ho):
                orow = out[n, oc, oy]
                for ox in range(Wo):
                    orow[ox] = b[oc]
                for ic in range(Cg):
                    c = g * Cg + ic
                    for ky in range(kh):
                        irow = xp[n, c, oy * stride + ky]
                        for kx in range(kw):
                            wv = w[oc, ic, ky, kx]
                            if stride == 1:
                                for ox in range(Wo):
                                    orow[ox] += wv * irow[ox + kx]
                            else:
                                for ox in range(Wo):
                                    orow[ox] += wv * irow[ox * stride + kx]
    return out


def conv2d_numba(x, w, b, stride=1, pad=0, groups=1):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    out = np.empty((B, O, conv_out_size(H, kh, stride, pad), conv_out_size(W, kw, stride, pad)), dtype=x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    return _conv2d_nb(xp, np.ascontiguousarray(w, dtype=x.dtype), np.ascontiguousarray(b, dtype=x.dtype),
                      stride, groups, out)


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` into ``(B, C*kh*kw, Ho*Wo)`` columns, channel-major then tap."""
    B, C, H, W = x.shape
    Ho, Wo = conv_out_size(H, kh, stride, pad), conv_out_size(W, kw, stride, pad)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return x.reshape(B, C, H * W)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((B, C, kh * kw, Ho, Wo), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky * kw + kx] = xp[:, :, ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    B, C, H, W = x_shape
    Ho, Wo = conv_out_size(H, kh, stride, pad), conv_out_size(W, kw, stride, pad)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return cols.reshape(B, C, H, W)
    cols = cols.reshape(B, C, kh * kw, Ho, Wo)
    gp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gp[:, :, ky:ky + stride * (Ho - 1) + 1:stride, kx:kx + stride * (Wo - 1) + 1:stride] += cols[:, :, ky * kw + kx]
    return gp[:, :, pad:pad + H, pad:pad + W] if pad else gp


def _depthwise_numpy(x, w, stride, pad, Ho, Wo):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    O, _, kh, kw = w.shape
    out = np.zeros((x.shape[0], O, Ho, Wo), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out += w[None, :, 0, ky, kx, None, None] * xp[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
                                                          kx:kx + stride * (Wo - 1) + 1:stride]
    return out


def conv2d_numpy(x, w, b, stride=1, pad=0, groups=1):
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    Ho, Wo = conv_out_size(H, kh, stride, pad), conv_out_size(W, kw, stride, pad)
    w = w.astype(x.dtype, copy=False)
    if groups == 1:
        out = np.matmul(w.reshape(O, -1), im2col(x, kh, kw, stride, pad)).reshape(B, O, Ho, Wo)
    elif Cg == 1 and O == C:
        out = _depthwise_numpy(x, w, stride, pad, Ho, Wo)
    else:
        og = O // groups
        out = np.concatenate([
            conv2d_numpy(x[:, g * Cg:(g + 1) * Cg], w[g * og:(g + 1) * og], np.zeros(og, x.dtype), stride, pad, 1)
            for g in range(groups)], axis=1)
    out += np.asarray(b, dtype=x.dtype)[None, :, None, None]
    return out


def conv2d(x, w, b, stride=1, pad=0, groups=1):
    # dense (groups=1) convolutions go through im2col + BLAS on both backends;
    # the direct loop nest only wins for grouped / depthwise kernels
    if _backend.USE_NUMBA and groups > 1:
        return conv2d_numba(x, w, b, stride, pad, groups)
    return conv2d_numpy(x, w, b, stride, pad, groups)


# --------------------------------------------------- depthwise conv adjoint


@njit(fastmath=True)
def _depthwise_wgrad_nb(xp, g, stride, kh, kw, gw):
    # reassociated (vectorized) sums; the compiled order is fixed, so results
    # are still run-to-run reproducible
    B, C, Ho, Wo = g.shape
    for c in range(C):
        for ky in range(kh):
            for kx in range(kw):
                acc = 0.0
                for n in range(B):
                    for oy in range(Ho):
                        grow = g[n, c, oy]
                        irow = xp[n, c, oy * stride + ky]
                        s = grow[0] * 0
                        if stride == 1:
                            for ox in range(Wo):
                                s += grow[ox] * irow[ox + kx]
                        else:
                            for ox in range(Wo):
                                s += grow[ox] * irow[ox * stride + kx]
                        acc += s
                gw[c, 0, ky, kx] = acc


def depthwise_grad_numba(xp, w, g, stride):
    """Input (padded) and kernel gradients of a depthwise conv on padded ``xp``.

    The input gradient is a full correlation of the (stride-dilated) output
    gradient with the flipped kernel, run through the forward kernel.
    """
    B, C, Ho, Wo = g.shape
    kh, kw = w.shape[2:]
    g = np.ascontiguousarray(g)
    if stride > 1:
        gd = np.zeros((B, C, stride * (Ho - 1) + 1, stride * (Wo - 1) + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gpad = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1], dtype=g.dtype)
    full = np.empty((B, C, gpad.shape[2] - kh + 1, gpad.shape[3] - kw + 1), dtype=g.dtype)
    _conv2d_nb(gpad, wf, np.zeros(C, g.dtype), 1, C, full)
    if full.shape[2:] == xp.shape[2:]:
        gxp = full
    else:
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gxp[:, :, :full.shape[2], :full.shape[3]] = full
    gw = np.empty(w.shape, dtype=g.dtype)
    _depthwise_wgrad_nb(np.ascontiguousarray(xp), g, stride, kh, kw, gw)
    return gxp, gw


def depthwise_grad_numpy(xp, w, g, stride):
    Ho, Wo = g.shape[2:]
    kh, kw = w.shape[2:]
    gxp = np.zeros(xp.shape, dtype=g.dtype)
    gw = np.empty(w.shape, dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sl = (slice(None), slice(None), slice(ky, ky + stride * (Ho - 1) + 1, stride),
                  slice(kx, kx + stride * (Wo - 1) + 1, stride))
            gxp[sl] += g * w[None, :, 0, ky, kx, None, None]
            gw[:, 0, ky, kx] = np.einsum("bchw,bchw->c", g, xp[sl])
    return gxp, gw


def depthwise_grad(xp, w, g, stride):
    if _backend.USE_NUMBA:
        return depthwise_grad_numba(xp, w, g, stride)
    return depthwise_grad_numpy(xp, w, g, stride)


# ------------------------------------------------------ batch norm (training)


@njit(fastmath=True)
def _bn_train_fwd_nb(x, gamma, beta, eps, xhat, out, mean, var):
    B, C, N = x.shape
    cnt = B * N
    for c in range(C):
        s = 0.0
        for n in range(B):
            for i in range(N):
                s += x[n, c, i]
        m = s / cnt
        q = 0.0
        for n in range(B):
            for i in range(N):
                d = x[n, c, i] - m
                q += d * d
        v = q / cnt
        mean[c] = m
        var[c] = v
        inv = 1.0 / np.sqrt(v + eps)
        ga = gamma[c]
        be = beta[c]
        for n in range(B):
            for i in range(N):
                h = (x[n, c, i] - m) * inv
                xhat[n, c, i] = h
                out[n, c, i] = h * ga + be


@njit(fastmath=True)
def _bn_train_bwd_nb(g, xhat, gamma, inv, gx, gsum, gxhat):
    B, C, N = g.shape
    cnt = B * N
    for c in range(C):
        s = 0.0
        t = 0.0
        for n in range(B):
            for i in range(N):
                gv = g[n, c, i]
                s += gv
                t += gv * xhat[n, c, i]
        gsum[c] = s
        gxhat[c] = t
        k = gamma[c] * inv[c] / cnt
        for n in range(B):
            for i in range(N):
                gx[n, c, i] = k * (cnt * g[n, c, i] - s - xhat[n, c, i] * t)


def bn_train_forward_numba(x, gamma, beta, eps):
    """Batch-statistics BN over axis 1.  Returns ``(out, xhat, mean, biased_var)``."""
    B, C = x.shape[:2]
    x3 = np.ascontiguousarray(x).reshape(B, C, -1)
    xhat = np.empty_like(x3)
    out = np.empty_like(x3)
    mean = np.empty(C)
    var = np.empty(C)
    _bn_train_fwd_nb(x3, np.asarray(gamma, np.float64), np.asarray(beta, np.float64), eps, xhat, out, mean, var)
    return out.reshape(x.shape), xhat.reshape(x.shape), mean, var


def bn_train_forward_numpy(x, gamma, beta, eps):
    B, C = x.shape[:2]
    x3 = x.reshape(B, C, -1)
    mean = x3.mean(axis=(0, 2), dtype=np.float64)
    xc = x3 - mean.astype(x.dtype)[None, :, None]
    var = (xc.astype(np.float64) ** 2).mean(axis=(0, 2))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv[None, :, None]
    out = xhat * np.asarray(gamma, x.dtype)[None, :, None] + np.asarray(beta, x.dtype)[None, :, None]
    return out.reshape(x.shape), xhat.reshape(x.shape), mean, var


def bn_train_backward_numba(g, xhat, gamma, inv):
    """Returns ``(grad_x, grad_gamma, grad_beta)``; ``inv`` is ``1/sqrt(var+eps)``."""
    B, C = g.shape[:2]
    g3 = np.ascontiguousarray(g).reshape(B, C, -1)
    gx = np.empty_like(g3)
    gsum = np.empty(C)
    gxhat = np.empty(C)
    _bn_train_bwd_nb(g3, np.ascontiguousarray(xhat).reshape(B, C, -1), np.asarray(gamma, np.float64),
                     np.asarray(inv, np.float64), gx, gsum, gxhat)
    return gx.reshape(g.shape), gxhat, gsum


def bn_train_backward_numpy(g, xhat, gamma, inv):
    B, C = g.shape[:2]
    g3 = g.reshape(B, C, -1)
    h3 = xhat.reshape(B, C, -1)
    cnt = g3.shape[0] * g3.shape[2]
    gsum = g3.sum(axis=(0, 2), dtype=np.float64)
    gxhat = np.einsum("bci,bci->c", g3, h3, dtype=np.float64)
    k = (np.asarray(gamma, np.float64) * inv / cnt).astype(g.dtype)[None, :, None]
    gx = k * (cnt * g3 - gsum.astype(g.dtype)[None, :, None] - h3 * gxhat.astype(g.dtype)[None, :, None])
    return gx.reshape(g.shape), gxhat, gsum


def bn_train_forward(x, gamma, beta, eps):
    if _backend.USE_NUMBA:
        return bn_train_forward_numba(x, gamma, beta, eps)
    return bn_train_forward_numpy(x, gamma, beta, eps)


def bn_train_backward(g, xhat, gamma, inv):
    if _backend.USE_NUMBA:
        return bn_train_backward_numba(g, xhat, gamma, inv)
    return bn_train_backward_numpy(g, xhat, gamma, inv)


# --------------------------------------------------------------- sparse conv


@njit
def _sparse_gather_nb(x, bidx, ii, jj, w, b, pad, groups, out):
    H = x.shape[2]
    W = x.shape[3]
    O, Cg, kh, kw = w.shape
    og = O // groups
    for n in range(bidx.shape[0]):
        bn = bidx[n]
        ci = ii[n]
        cj = jj[n]
        for oc in range(O):
            g = oc // og
            acc = b[oc]
            for ic in range(Cg):
                c = g * Cg + ic
                for ky in range(kh):
                    iy = ci - pad + ky
                    if iy < 0 or iy >= H:
                        continue
                    for kx in range(kw):
                        ix = cj - pad + kx
                        if ix < 0 or ix >= W:
                            continue
                        acc += w[oc, ic, ky, kx] * x[bn, c, iy, ix]
            out[n, oc] = acc
    return out


@njit
def _sparse_submanifold_nb(feat, nbr, w, b, groups, out):
    O, Cg, kh, kw = w.shape
    og = O // groups
    for n in range(nbr.shape[0]):
        for oc in range(O):
            g = oc // og
            acc = b[oc]
            for ic in range(Cg):
                c = g * Cg + ic
                for t in range(kh * kw):
                    m = nbr[n, t]
                    if m >= 0:
                        acc += w[oc, ic, t // kw, t % kw] * feat[m, c]
            out[n, oc] = acc
    return out


def sparse_gather_conv_numba(x, bidx, ii, jj, w, b, pad=1, groups=1):
    out = np.empty((bidx.shape[0], w.shape[0]), dtype=x.dtype)
    return _sparse_gather_nb(np.ascontiguousarray(x), bidx, ii, jj, np.ascontiguousarray(w, dtype=x.dtype),
                             np.ascontiguousarray(b, dtype=x.dtype), pad, groups, out)


def sparse_submanifold_conv_numba(feat, nbr, w, b, groups=1):
    out = np.empty((nbr.shape[0], w.shape[0]), dtype=feat.dtype)
    return _sparse_submanifold_nb(np.ascontiguousarray(feat), nbr, np.ascontiguousarray(w, dtype=feat.dtype),
                                  np.ascontiguousarray(b, dtype=feat.dtype), groups, out)


def gather_cols(x, bidx, ii, jj, kh, kw, pad):
    """Dense neighbourhoods of each site: ``(N, C, kh*kw)``, zero outside the map."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    N, C = bidx.shape[0], x.shape[1]
    cols = np.empty((N, C, kh * kw), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky * kw + kx] = xp[bidx, :, ii + ky, jj + kx]
    return cols


def neighbour_cols(feat, nbr):
    """Submanifold neighbourhoods ``(N, C, T)``; index -1 reads zero."""
    fp = np.concatenate([feat, np.zeros((1, feat.shape[1]), feat.dtype)], axis=0)
    return fp[nbr].transpose(0, 2, 1)


def apply_cols(cols, w, b, groups):
    """Contract gathered ``(N, C, T)`` columns with ``(O, C/groups, kh, kw)`` weights."""
    N, C, T = cols.shape
    O, Cg = w.shape[:2]
    wf = w.reshape(O, Cg, T).astype(cols.dtype, copy=False)
    if groups == 1:
        out = cols.reshape(N, C * T) @ wf.reshape(O, Cg * T).T
    elif Cg == 1 and O == C:
        out = np.einsum("nct,ct->nc", cols, wf[:, 0])
    else:
        og = O // groups
        out = np.concatenate([
            cols[:, g * Cg:(g + 1) * Cg].reshape(N, Cg * T) @ wf[g * og:(g + 1) * og].reshape(og, Cg * T).T
            for g in range(groups)], axis=1)
    return out + np.asarray(b, dtype=cols.dtype)[None, :]


def sparse_gather_conv_numpy(x, bidx, ii, jj, w, b, pad=1, groups=1):
    return apply_cols(gather_cols(x, bidx, ii, jj, w.shape[2], w.shape[3], pad), w, b, groups)


def sparse_submanifold_conv_numpy(feat, nbr, w, b, groups=1):
    return apply_cols(neighbour_cols(feat, nbr), w, b, groups)


def sparse_gather_conv(x, bidx, ii, jj, w, b, pad=1, groups=1):
    # same policy as dense: BLAS for groups=1, the loop nest for grouped kernels
    if _backend.USE_NUMBA and groups > 1:
        return sparse_gather_conv_numba(x, bidx, ii, jj, w, b, pad, groups)
    return sparse_gather_conv_numpy(x, bidx, ii, jj, w, b, pad, groups)


def sparse_submanifold_conv(feat, nbr, w, b, groups=1):
    if _backend.USE_NUMBA and groups > 1:
        return sparse_submanifold_conv_numba(feat, nbr, w, b, groups)
    return sparse_submanifold_conv_numpy(feat, nbr, w, b, groups)


# ------------------------------------------------------- component labelling


@njit
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit
def _label8_nb(mask):
    H, W = mask.shape
    parent = np.arange(H * W + 1)
    lab = np.zeros((H, W), dtype=np.int64)
    nxt = 1
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            best = 0
            # already-visited 8-neighbours: W, NW, N, NE
            for dy, dx in ((0, -1), (-1, -1), (-1, 0), (-1, 1)):
                yy = y + dy
                xx = x + dx
                if yy < 0 or xx < 0 or xx >= W:
                    continue
                l2 = lab[yy, xx]
                if l2 == 0:
                    continue
                if best == 0:
                    best = l2
                else:
                    ra = _find(parent, best)
                    rb = _find(parent, l2)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
            if best == 0:
                best = nxt
                nxt += 1
            lab[y, x] = best
    # compact labels in raster order of first appearance
    remap = np.zeros(nxt, dtype=np.int64)
    count = 0
    for y in range(H):
        for x in range(W):
            if lab[y, x]:
                r = _find(parent, lab[y, x])
                if remap[r] == 0:
                    count += 1
                    remap[r] = count
                lab[y, x] = remap[r]
    return lab, count


def label8_numba(mask):
    return _label8_nb(np.ascontiguousarray(mask, dtype=np.bool_))


def label8_numpy(mask):
    from scipy import ndimage

    lab, count = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3), dtype=int))
    return lab.astype(np.int64), int(count)


def label8(mask):
    """8-connected labelling of a 2D boolean mask; labels follow raster order."""
    if _backend.USE_NUMBA:
        lab, n = label8_numba(mask)
        return lab, int(n)
    return label8_numpy(mask)

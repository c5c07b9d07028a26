"""Dual-branch sparse decoder.

Fast branch: a coarse head turns the 1/coarse_ratio feature map into a
probability map V; TOP-K keeps the ``ceil(alpha * Hc * Wc)`` most confident
cells.  Slow branch: the kept cells are expanded to 2x2 blocks on the
1/fine_ratio grid, and the sparse head runs only at those sites
(submanifold semantics: the active set is fixed, inactive neighbours read as
zero).  The upsample block scatters the sparse result back to a dense map,
applies a 1x1 conv and bilinear upsampling to full resolution, then sigmoid.

Nothing flows backward through TOP-K; the coarse head learns from its own
loss on V.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import autograd as ag
from .layers import Conv, ConvBN, bn_forward, layer_forward, make_conv, make_conv_bn
from .tensor_ops import ShapeError


class SiteIndexError(IndexError):
    """An active site lies outside the feature map."""


@dataclass
class CoarseHeadParams:
    conv: Union[ConvBN, Conv]
    out: Conv


@dataclass
class SparseHeadParams:
    layers: List[Union[ConvBN, Conv]]   # alternating depthwise 3x3 / pointwise 1x1
    final: Conv                          # full 3x3, no BN / activation

    @property
    def M(self) -> int:
        return len(self.layers)

    def all_layers(self):
        return list(self.layers) + [self.final]


@dataclass
class SparseMask:
    bits: np.ndarray      # (B, 1, Hc, Wc) uint8
    k: int                # ones per image


@dataclass
class ActiveSiteIndex:
    """Fine-resolution active sites, sorted by (batch, row, col).

    ``lookup`` is a direct-address table ``(B, Hf, Wf)`` holding each site's
    rank, or -1 where inactive.
    """
    sites: np.ndarray          # (N, 2) int64
    batch: np.ndarray          # (N,) int64
    shape: tuple               # (B, Hf, Wf)
    upsample_factor: int = 2
    lookup: np.ndarray = None
    _nbr_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_sites(cls, sites, shape, batch=None, upsample_factor=2):
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
        batch = np.zeros(len(sites), np.int64) if batch is None else np.asarray(batch, dtype=np.int64).reshape(-1)
        B, H, W = shape
        if len(sites) and (sites.min() < 0 or sites[:, 0].max() >= H or sites[:, 1].max() >= W
                           or batch.min() < 0 or batch.max() >= B):
            raise SiteIndexError(f"site outside map of shape {shape}")
        order = np.lexsort((sites[:, 1], sites[:, 0], batch))
        sites, batch = sites[order], batch[order]
        lookup = np.full(shape, -1, dtype=np.int64)
        lookup[batch, sites[:, 0], sites[:, 1]] = np.arange(len(sites))
        if len(sites) and (lookup >= 0).sum() != len(sites):
            raise SiteIndexError("duplicate active sites")
        return cls(sites, batch, tuple(shape), upsample_factor, lookup)

    def __len__(self):
        return len(self.sites)

    @property
    def ii(self):
        return self.sites[:, 0]

    @property
    def jj(self):
        return self.sites[:, 1]

    def rank(self, i, j, b=0) -> Optional[int]:
        r = int(self.lookup[b, i, j])
        return None if r < 0 else r

    def mask(self, dtype=np.float32) -> np.ndarray:
        """Dense ``(B, 1, Hf, Wf)`` indicator of active sites."""
        return (self.lookup >= 0).astype(dtype)[:, None]

    def neighbours(self, k: int) -> np.ndarray:
        """``(N, k*k)`` ranks of each site's neighbours (row-major taps), -1 if inactive."""
        if k not in self._nbr_cache:
            p = k // 2
            B, H, W = self.shape
            padded = np.full((B, H + 2 * p, W + 2 * p), -1, dtype=np.int64)
            padded[:, p:p + H, p:p + W] = self.lookup
            nbr = np.empty((len(self), k * k), dtype=np.int64)
            for dy in range(k):
                for dx in range(k):
                    nbr[:, dy * k + dx] = padded[self.batch, self.ii + dy, self.jj + dx]
            self._nbr_cache[k] = nbr
        return self._nbr_cache[k]


@dataclass
class SparseFeature:
    values: np.ndarray          # (N, C)
    index: ActiveSiteIndex


# ------------------------------------------------------------ construction


def make_coarse_head(rng, cin, hidden, dtype=np.float32) -> CoarseHeadParams:
    return CoarseHeadParams(make_conv_bn(rng, cin, hidden, 3, dtype=dtype), make_conv(rng, hidden, 1, 1, dtype=dtype))


def make_sparse_head(rng, cin, M, cout=None, dtype=np.float32) -> SparseHeadParams:
    cout = cout or cin
    layers = []
    for i in range(M):
        if i % 2 == 0:
            layers.append(make_conv_bn(rng, cin, cin, 3, groups=cin, dtype=dtype))
        else:
            layers.append(make_conv_bn(rng, cin, cin, 1, dtype=dtype))
    return SparseHeadParams(layers, make_conv(rng, cin, cout, 3, dtype=dtype))


def make_upsample_conv(rng, cin, bias=-4.0, dtype=np.float32) -> Conv:
    return make_conv(rng, cin, 1, 1, bias=bias, dtype=dtype)


# --------------------------------------------------------------- fast branch


def coarse_head_forward(p, params: CoarseHeadParams, tape, training=False):
    h = layer_forward(p, params.conv, tape, training, act="relu")
    return layer_forward(h, params.out, tape, training, act="sigmoid")


def coarse_head(p_coarse, params: CoarseHeadParams, expected_hw=None) -> np.ndarray:
    p_coarse = np.asarray(p_coarse)
    if expected_hw is not None and tuple(p_coarse.shape[2:]) != tuple(expected_hw):
        raise ShapeError(f"coarse head expects spatial {expected_hw}, got {p_coarse.shape[2:]}")
    return coarse_head_forward(p_coarse, params, ag.NoTape()).data


def topk_count(alpha: float, n_cells: int) -> int:
    # round first so e.g. 0.01 * 100 does not ceil to 2
    return max(1, math.ceil(round(alpha * n_cells, 9)))


def sparse_sample(v, alpha: float) -> SparseMask:
    """Keep the ``ceil(alpha * Hc * Wc)`` largest cells of each map.

    Ties go to the smaller row-major index.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    v = np.asarray(v)
    if v.ndim == 2:
        v = v[None, None]
    elif v.ndim == 3:
        v = v[None]
    B, _, H, W = v.shape
    k = topk_count(alpha, H * W)
    n = H * W
    bits = np.zeros((B, 1, n), dtype=np.uint8)
    for b in range(B):
        flat = v[b, 0].ravel()
        # k-th largest value in O(n); cells above it are in, ties fill the rest in row-major order
        thr = np.partition(flat, n - k)[n - k]
        above = flat > thr
        bits[b, 0, above] = 1
        bits[b, 0, np.flatnonzero(flat == thr)[:k - int(above.sum())]] = 1
    ag.note_branch("topk", bits)
    return SparseMask(bits.reshape(B, 1, H, W), k)


def build_active_index(mask: SparseMask, upsample_factor: int = 2) -> ActiveSiteIndex:
    """Expand every kept coarse cell to its ``f x f`` block on the fine grid."""
    bits = mask.bits if isinstance(mask, SparseMask) else np.asarray(mask)
    if bits.ndim == 2:
        bits = bits[None, None]
    elif bits.ndim == 3:
        bits = bits[None]
    B, _, H, W = bits.shape
    f = upsample_factor
    b, ci, cj = np.nonzero(bits[:, 0])
    di, dj = np.divmod(np.arange(f * f), f)
    fi = (ci[:, None] * f + di[None, :]).ravel()
    fj = (cj[:, None] * f + dj[None, :]).ravel()
    fb = np.repeat(b, f * f)
    return ActiveSiteIndex.from_sites(np.stack([fi, fj], axis=1), (B, H * f, W * f), fb, f)


# --------------------------------------------------------------- slow branch


def _check_sparse_spec(weights, stride):
    kh, kw = weights.shape[2:]
    if stride != 1 or kh != kw or kh not in (1, 3):
        raise ShapeError("sparse conv supports stride 1 with 1x1 or 3x3 kernels only")


def sparse_conv(inp, weights, index: ActiveSiteIndex, layer_position: str = "interior", bias=None,
                stride: int = 1, groups: int = 1) -> np.ndarray:
    """One sparse convolution, returning ``(N, C_out)`` values at the active sites.

    ``first``: ``inp`` is the dense ``(B, C, Hf, Wf)`` map and full
    neighbourhoods are gathered.  ``interior``: ``inp`` holds ``(N, C)`` site
    values and inactive neighbours read as zero.
    """
    weights = np.asarray(weights)
    _check_sparse_spec(weights, stride)
    bias = np.zeros(weights.shape[0], weights.dtype) if bias is None else bias
    k = weights.shape[2]
    if layer_position == "first":
        inp = np.asarray(inp)
        if tuple(inp.shape[2:]) != tuple(index.shape[1:]) or inp.shape[0] < index.shape[0]:
            raise SiteIndexError(f"index shape {index.shape} does not fit input {inp.shape}")
        return ag.sparse_gather_conv(inp, index.batch, index.ii, index.jj, weights, bias, k // 2, groups).data
    if layer_position == "interior":
        vals = inp.values if isinstance(inp, SparseFeature) else np.asarray(inp)
        if vals.shape[0] != len(index):
            raise SiteIndexError(f"{vals.shape[0]} values for {len(index)} sites")
        return ag.sparse_submanifold_conv(vals, index.neighbours(k), weights, bias, groups).data
    raise ValueError(f"unknown layer position {layer_position!r}")


def _sparse_layer(x, layer, index, first, tape):
    k = layer.weight.shape[2]
    w = tape.var(layer.weight)
    b = tape.var(layer.bias) if isinstance(layer, Conv) else None
    if first:
        return ag.sparse_gather_conv(x, index.batch, index.ii, index.jj, w, b, k // 2, layer.groups)
    return ag.sparse_submanifold_conv(x, index.neighbours(k), w, b, layer.groups)


def sparse_head_forward(p_fine, index: ActiveSiteIndex, params: SparseHeadParams, tape, training=False):
    x = p_fine
    for n, layer in enumerate(params.all_layers()):
        x = _sparse_layer(x, layer, index, n == 0, tape)
        if layer is params.final:
            break
        if isinstance(layer, ConvBN):
            x = bn_forward(x, layer.bn, tape, training)
        x = ag.relu(x)
    return x


def sparse_head(p_fine, index: ActiveSiteIndex, params: SparseHeadParams) -> SparseFeature:
    p_fine = np.asarray(p_fine)
    cout = params.final.weight.shape[0]
    if len(index) == 0:
        return SparseFeature(np.zeros((0, cout), p_fine.dtype), index)
    if tuple(p_fine.shape[2:]) != tuple(index.shape[1:]):
        raise SiteIndexError(f"index shape {index.shape} does not fit input {p_fine.shape}")
    out = sparse_head_forward(p_fine, index, params, ag.NoTape())
    return SparseFeature(out.data, index)


def dense_oracle(p_fine, index: ActiveSiteIndex, params: SparseHeadParams) -> np.ndarray:
    """Run the sparse-head layers densely, zeroing inactive positions after each."""
    x = ag.const(np.asarray(p_fine))
    mask = index.mask(x.dtype)
    tape = ag.NoTape()
    for layer in params.all_layers():
        last = layer is params.final
        x = layer_forward(x, layer, tape, False, act=None if last else "relu")
        x = ag.Var(x.data * mask)
    return x.data


def upsample_forward(values, index: ActiveSiteIndex, out_conv: Conv, factor: int, tape, batch=None):
    B, H, W = index.shape
    if batch is not None:
        B = batch
    c = values.shape[1]
    dense = ag.scatter_sites(values, index.batch, index.ii, index.jj, (B, c, H, W))
    logit = layer_forward(dense, out_conv, tape, False, act=None)
    return ag.sigmoid(ag.upsample_bilinear(logit, factor))


def upsample_block(feature: SparseFeature, index: ActiveSiteIndex, fine_shape, out_conv: Conv, factor: int) -> np.ndarray:
    if tuple(fine_shape) != tuple(index.shape[1:]):
        raise ShapeError(f"fine shape {fine_shape} does not match index {index.shape}")
    values = feature.values if isinstance(feature, SparseFeature) else np.asarray(feature)
    return upsample_forward(values, index, out_conv, factor, ag.NoTape()).data


def dbsd_forward_ag(p_coarse, p_fine, alpha, coarse: CoarseHeadParams, sparse: SparseHeadParams, out_conv: Conv,
                    factor: int, tape, training=False):
    """Autograd decoder pass: returns ``(V, O, index)``."""
    v = coarse_head_forward(p_coarse, coarse, tape, training)
    mask = sparse_sample(v.data, alpha)
    B, _, hf, wf = p_fine.shape
    index = build_active_index(mask, hf // v.shape[2])
    feat = sparse_head_forward(p_fine, index, sparse, tape, training)
    o = upsample_forward(feat, index, out_conv, factor, tape, batch=B)
    return v, o, index


# ------------------------------------------------------------------ costs


def layer_macs_per_site(layer) -> int:
    o, cg, kh, kw = layer.weight.shape
    return o * cg * kh * kw


def sparse_head_macs(index: ActiveSiteIndex, params: SparseHeadParams) -> int:
    return len(index) * sum(layer_macs_per_site(l) for l in params.all_layers())


def dense_head_macs(shape, params: SparseHeadParams) -> int:
    B, H, W = shape
    return B * H * W * sum(layer_macs_per_site(l) for l in params.all_layers())

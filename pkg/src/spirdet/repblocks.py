"""Reparameterizable encoder blocks.

Training form: each block is a depthwise part followed by a pointwise part.
The depthwise part sums K parallel 3x3 convs, a 1x1 conv and (when shapes
allow) a BN-only identity, each with its own BN, then applies ReLU.  The
pointwise part does the same with K parallel 1x1 convs and an identity.

Inference form: every part collapses to a single conv with bias.  Downsampling
blocks (stride 2) use full 3x3 kernels in the depthwise slot so the block can
change channel width.

The K parallel kernels of a part are stored as one bank ``(K, out, in/groups,
kh, kw)`` with BN arrays shaped ``(K, out)``; :meth:`RepPart.branches` exposes
them as individual :class:`BranchConv` views.
"""
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from . import autograd as ag
from .layers import Conv, bn_forward, uniform_kernel
from .tensor_ops import BnParams, ShapeError

KINDS = ("dw3x3", "dw1x1", "full3x3", "pw1x1", "identity")


class StructureError(ValueError):
    """Branches cannot be combined into the requested structure."""


@dataclass
class BranchConv:
    kernel: Optional[np.ndarray]
    bn: BnParams
    kind: str
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructureError(f"unknown branch kind {self.kind!r}")
        if self.kind == "identity":
            if self.kernel is not None:
                raise StructureError("identity branch carries no kernel")
            if self.stride != 1:
                raise StructureError("identity branch requires stride 1")

    @property
    def depthwise(self) -> bool:
        return self.kind in ("dw3x3", "dw1x1")


@dataclass
class RepPart:
    bank: np.ndarray
    bank_bn: BnParams
    kind: str                      # kind of the banked branches: dw3x3 | full3x3 | pw1x1
    stride: int = 1
    scale: Optional[np.ndarray] = None
    scale_bn: Optional[BnParams] = None
    identity_bn: Optional[BnParams] = None

    @property
    def K(self) -> int:
        return self.bank.shape[0]

    @property
    def out_channels(self) -> int:
        return self.bank.shape[1]

    @property
    def in_channels(self) -> int:
        return self.out_channels if self.kind == "dw3x3" else self.bank.shape[2]

    @property
    def groups(self) -> int:
        return self.out_channels if self.kind == "dw3x3" else 1

    @property
    def ksize(self) -> int:
        return self.bank.shape[-1]

    def branches(self) -> List[BranchConv]:
        bn = self.bank_bn
        out = [BranchConv(self.bank[k], BnParams(bn.gamma[k], bn.beta[k], bn.running_mean[k], bn.running_var[k], bn.eps),
                          self.kind, self.stride) for k in range(self.K)]
        if self.scale is not None:
            kind = "dw1x1" if self.kind == "dw3x3" else "pw1x1"
            out.append(BranchConv(self.scale, self.scale_bn, kind, self.stride))
        if self.identity_bn is not None:
            out.append(BranchConv(None, self.identity_bn, "identity"))
        return out


@dataclass
class RepBlockTrainParams:
    depthwise: RepPart
    pointwise: RepPart

    @property
    def K(self) -> int:
        return self.depthwise.K

    @property
    def stride(self) -> int:
        return self.depthwise.stride

    @property
    def in_channels(self) -> int:
        return self.depthwise.in_channels

    @property
    def out_channels(self) -> int:
        return self.pointwise.out_channels


@dataclass
class FusedBlockParams:
    depthwise: Conv
    pointwise: Conv

    @property
    def stride(self) -> int:
        return self.depthwise.stride


Block = Union[RepBlockTrainParams, FusedBlockParams]


# ------------------------------------------------------------ construction


def _bank_bn(k, c, dtype):
    bn = BnParams.identity(c, dtype)
    return BnParams(*(np.tile(a, (k, 1)) for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var)), bn.eps)


def make_repblock(rng, cin, cout, stride, K, dtype=np.float32) -> RepBlockTrainParams:
    """Freshly initialised training-form block.

    A block either keeps its width at stride 1 (depthwise slot) or changes
    width / downsamples (full 3x3 slot).  Identity branches appear exactly
    when stride is 1 and widths match.
    """
    if stride not in (1, 2):
        raise StructureError(f"stride must be 1 or 2, got {stride}")
    same = stride == 1 and cin == cout
    if same:
        dw = RepPart(uniform_kernel(rng, (K, cin, 1, 3, 3), dtype), _bank_bn(K, cin, dtype), "dw3x3", 1,
                     scale=uniform_kernel(rng, (cin, 1, 1, 1), dtype), scale_bn=BnParams.identity(cin, dtype),
                     identity_bn=BnParams.identity(cin, dtype))
    else:
        dw = RepPart(uniform_kernel(rng, (K, cout, cin, 3, 3), dtype), _bank_bn(K, cout, dtype), "full3x3", stride,
                     scale=uniform_kernel(rng, (cout, cin, 1, 1), dtype), scale_bn=BnParams.identity(cout, dtype))
    pw = RepPart(uniform_kernel(rng, (K, cout, cout, 1, 1), dtype), _bank_bn(K, cout, dtype), "pw1x1", 1,
                 identity_bn=BnParams.identity(cout, dtype))
    return RepBlockTrainParams(dw, pw)


# ------------------------------------------------------------------ fusion


def canonicalize_branch(branch: BranchConv, target: Optional[str] = None, channels: Optional[int] = None) -> BranchConv:
    """Rewrite a branch as an equivalent ``target``-kind kernel.

    1x1 kernels are embedded at the centre of a 3x3 kernel; identity becomes a
    centre-one kernel (depthwise or full) or an identity channel matrix for a
    pointwise target.
    """
    if target is None:
        target = {"dw1x1": "dw3x3", "pw1x1": "full3x3", "identity": "dw3x3"}.get(branch.kind, branch.kind)
    if branch.kind == target:
        return branch
    bn = branch.bn
    if branch.kind == "identity":
        c = bn.channels
        if channels is not None and channels != c:
            raise StructureError(f"identity needs in == out channels, got {channels} -> {c}")
        dtype = bn.gamma.dtype
        if target == "dw3x3":
            k = np.zeros((c, 1, 3, 3), dtype)
            k[:, 0, 1, 1] = 1
        elif target == "full3x3":
            k = np.zeros((c, c, 3, 3), dtype)
            k[np.arange(c), np.arange(c), 1, 1] = 1
        elif target == "pw1x1":
            k = np.eye(c, dtype=dtype).reshape(c, c, 1, 1)
        else:
            raise StructureError(f"cannot express identity as {target}")
        return BranchConv(k, bn, target, 1)
    ok = {("dw1x1", "dw3x3"), ("pw1x1", "full3x3")}
    if (branch.kind, target) not in ok:
        raise StructureError(f"cannot canonicalize {branch.kind} to {target}")
    o, i = branch.kernel.shape[:2]
    k = np.zeros((o, i, 3, 3), branch.kernel.dtype)
    k[:, :, 1, 1] = branch.kernel[:, :, 0, 0]
    return BranchConv(k, bn, target, branch.stride)


def _bn64(bn: BnParams) -> BnParams:
    return BnParams(*(np.asarray(a, np.float64) for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var)), bn.eps)


def fold_bn(branch: BranchConv):
    """Fold the branch BN into its kernel: returns float64 ``(kernel, bias)``."""
    if branch.kind == "identity":
        branch = canonicalize_branch(branch)
    scale, shift = _bn64(branch.bn).scale_shift()
    k = branch.kernel.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    return k, shift


def _fuse(part: RepPart) -> Conv:
    target = part.kind
    kernel = bias = None
    for br in part.branches():
        cb = canonicalize_branch(br, target, part.in_channels)
        k, b = fold_bn(cb)
        if kernel is None:
            kernel, bias = k, b
        elif k.shape != kernel.shape:
            raise StructureError(f"branch kernel {k.shape} does not match {kernel.shape}")
        else:
            kernel += k
            bias += b
    dtype = part.bank.dtype
    return Conv(kernel.astype(dtype), bias.astype(dtype), part.stride, part.ksize // 2, part.groups)


def fuse_depthwise(part: RepPart) -> Conv:
    return _fuse(part)


def fuse_pointwise(part: RepPart) -> Conv:
    return _fuse(part)


def fuse_block(block: RepBlockTrainParams) -> FusedBlockParams:
    return FusedBlockParams(fuse_depthwise(block.depthwise), fuse_pointwise(block.pointwise))


# ----------------------------------------------------------------- forward


def part_forward(x, part: RepPart, tape, training=False):
    """Sum of BN'd branches followed by ReLU (autograd)."""
    x = ag.const(x)
    B = x.shape[0]
    K, O = part.K, part.out_channels
    if x.shape[1] != part.in_channels:
        raise ShapeError(f"block expects {part.in_channels} channels, got {x.shape[1]}")
    kh = part.ksize
    w = ag.reshape(tape.var(part.bank), (K * O,) + part.bank.shape[2:])
    if part.kind == "dw3x3":
        y = ag.conv2d(ag.tile_channels(x, K), w, None, part.stride, kh // 2, K * O)
    else:
        y = ag.conv2d(x, w, None, part.stride, kh // 2, 1)
    y = bn_forward(y, part.bank_bn, tape, training)
    ho, wo = y.shape[2:]
    terms = [ag.sum_axis(ag.reshape(y, (B, K, O, ho, wo)), 1)]
    if part.scale is not None:
        s = ag.conv2d(x, tape.var(part.scale), None, part.stride, 0, part.groups)
        terms.append(bn_forward(s, part.scale_bn, tape, training))
    if part.identity_bn is not None:
        terms.append(bn_forward(x, part.identity_bn, tape, training))
    return ag.relu(ag.add(*terms))


def block_forward(x, block: Block, tape, training=False):
    if isinstance(block, FusedBlockParams):
        for conv in (block.depthwise, block.pointwise):
            x = ag.relu(ag.conv2d(x, tape.var(conv.weight), tape.var(conv.bias), conv.stride, conv.padding, conv.groups))
        return x
    return part_forward(part_forward(x, block.depthwise, tape, training), block.pointwise, tape, training)


def repblock_forward(x, params: Block, mode: str = "train") -> np.ndarray:
    """Evaluate one block on a numpy tensor.

    ``mode="train"`` evaluates the multi-branch form with running BN
    statistics; ``mode="fused"`` expects :class:`FusedBlockParams`.
    """
    if mode == "fused" and not isinstance(params, FusedBlockParams):
        raise StructureError("fused mode needs FusedBlockParams; call fuse_block first")
    if mode == "train" and not isinstance(params, RepBlockTrainParams):
        raise StructureError("train mode needs RepBlockTrainParams")
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    return block_forward(x, params, ag.NoTape(), training=False).data


# --------------------------------------------------------------- accounting


def _bn_count(bn):
    return 0 if bn is None else bn.gamma.size + bn.beta.size


def train_param_count(block: RepBlockTrainParams) -> int:
    n = 0
    for part in (block.depthwise, block.pointwise):
        n += part.bank.size + _bn_count(part.bank_bn) + _bn_count(part.identity_bn)
        if part.scale is not None:
            n += part.scale.size + _bn_count(part.scale_bn)
    return n


def fused_param_count(block: FusedBlockParams) -> int:
    return sum(c.weight.size + c.bias.size for c in (block.depthwise, block.pointwise))


def depthwise_kernel_ratio(block: RepBlockTrainParams) -> float:
    """Fused depthwise-slot kernel size over the summed canonical branch kernels."""
    part = block.depthwise
    canon = [canonicalize_branch(b, part.kind, part.in_channels) for b in part.branches()]
    fused = fuse_depthwise(part)
    return fused.weight.size / sum(c.kernel.size for c in canon)

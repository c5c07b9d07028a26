"""Parameter containers shared by the encoder, neck and decoder."""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .tensor_ops import BnParams, ParameterError

BN_MOMENTUM = 0.1


@dataclass
class Conv:
    """Convolution with bias; the inference (BN-folded) form of every layer."""
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class ConvBN:
    """Bias-free convolution followed by batch norm (training form)."""
    weight: np.ndarray
    bn: BnParams
    stride: int = 1
    padding: int = 0
    groups: int = 1


def uniform_kernel(rng, shape, dtype=np.float32):
    """U(-s, s) with s = 1/sqrt(fan_in), fan_in = (in/groups)*kh*kw."""
    fan_in = int(np.prod(shape[-3:]))
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


def make_conv_bn(rng, cin, cout, k, stride=1, groups=1, dtype=np.float32):
    w = uniform_kernel(rng, (cout, cin // groups, k, k), dtype)
    return ConvBN(w, BnParams.identity(cout, dtype), stride, k // 2, groups)


def make_conv(rng, cin, cout, k, stride=1, groups=1, bias=0.0, dtype=np.float32):
    w = uniform_kernel(rng, (cout, cin // groups, k, k), dtype)
    return Conv(w, np.full(cout, bias, dtype), stride, k // 2, groups)


def bn_forward(x, bn: BnParams, tape, training, momentum=None):
    """Batch norm on axis 1 of ``x``.  ``bn`` arrays may be multi-dimensional
    (e.g. ``(K, C)`` for a branch bank); they are flattened to match axis 1.

    In training mode the running statistics are updated in place.
    """
    gamma = ag.reshape(tape.var(bn.gamma), (-1,))
    beta = ag.reshape(tape.var(bn.beta), (-1,))
    rm = bn.running_mean.reshape(-1)
    rv = bn.running_var.reshape(-1)
    if not training and np.any(rv + bn.eps <= 0):
        raise ParameterError("running_var + eps must be positive for every channel")
    out = ag.batch_norm(x, gamma, beta, rm, rv, bn.eps, training)
    if training:
        momentum = BN_MOMENTUM if momentum is None else momentum
        mean, var, n = out.extra
        unbiased = var * (n / max(n - 1, 1))
        rm *= 1 - momentum
        rm += momentum * mean.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * unbiased.astype(rv.dtype)
    return out


def conv_bn_forward(x, layer: ConvBN, tape, training, act: Optional[str] = "relu"):
    y = ag.conv2d(x, tape.var(layer.weight), None, layer.stride, layer.padding, layer.groups)
    y = bn_forward(y, layer.bn, tape, training)
    return ag.relu(y) if act == "relu" else y


def conv_forward(x, layer: Conv, tape, act: Optional[str] = None):
    y = ag.conv2d(x, tape.var(layer.weight), tape.var(layer.bias), layer.stride, layer.padding, layer.groups)
    if act == "relu":
        return ag.relu(y)
    if act == "sigmoid":
        return ag.sigmoid(y)
    return y


def layer_forward(x, layer, tape, training, act="relu"):
    """Dispatch on train form (:class:`ConvBN`) or folded form (:class:`Conv`)."""
    if isinstance(layer, ConvBN):
        return conv_bn_forward(x, layer, tape, training, act)
    return conv_forward(x, layer, tape, act)


def fold_conv_bn(layer: ConvBN) -> Conv:
    bn = layer.bn
    scale, shift = BnParams(*(np.asarray(a, np.float64) for a in (bn.gamma, bn.beta, bn.running_mean,
                                                                  bn.running_var)), bn.eps).scale_shift()
    w = layer.weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    return Conv(w.astype(layer.weight.dtype), shift.astype(layer.weight.dtype), layer.stride, layer.padding, layer.groups)

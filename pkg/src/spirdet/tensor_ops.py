"""Dense NCHW tensor operations used by every inference path.

A "tensor" here is a plain 4-D numpy array ``(batch, channels, height, width)``.
Convolution is cross-correlation with zero padding; bilinear resampling uses
the half-pixel (align-corners=False) convention.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input tensors have incompatible shapes."""


class ParameterError(ValueError):
    """Layer parameters are numerically invalid."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError(f"invalid conv spec {self}")

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        return (kernels.conv_out_size(h, kh, self.stride, self.padding),
                kernels.conv_out_size(w, kw, self.stride, self.padding))


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels, dtype=np.float32, eps=1e-5):
        """BN that maps x to x: gamma=1, beta=0, mean=0, var=1-eps."""
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype), np.zeros(channels, dtype),
                   np.full(channels, 1.0 - eps, dtype), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[-1]

    def scale_shift(self):
        """Per-channel ``(scale, shift)`` so that ``bn(x) = scale * x + shift``."""
        denom = self.running_var + self.eps
        if np.any(denom <= 0):
            raise ParameterError("running_var + eps must be positive for every channel")
        scale = self.gamma / np.sqrt(denom)
        return scale, self.beta - self.running_mean * scale


def as_tensor(x, dtype=None) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"expected a non-empty 4-D NCHW tensor, got shape {x.shape}")
    return x


def conv2d(x, weights, bias, spec: ConvSpec) -> np.ndarray:
    x = as_tensor(x)
    weights = np.asarray(weights)
    if weights.ndim != 4:
        raise ShapeError(f"weights must be 4-D, got {weights.shape}")
    O, Cg, kh, kw = weights.shape
    C = x.shape[1]
    if (kh, kw) != tuple(spec.kernel):
        raise ShapeError(f"kernel {weights.shape[2:]} does not match spec {spec.kernel}")
    if C % spec.groups or O % spec.groups or Cg != C // spec.groups:
        raise ShapeError(f"channels in={C} out={O} per-group={Cg} inconsistent with groups={spec.groups}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty for input {x.shape} and {spec}")
    bias = np.zeros(O, x.dtype) if bias is None else np.asarray(bias)
    if bias.shape != (O,):
        raise ShapeError(f"bias shape {bias.shape} != ({O},)")
    return kernels.conv2d(x, weights, bias, spec.stride, spec.padding, spec.groups)


def batch_norm_inference(x, bn: BnParams) -> np.ndarray:
    x = as_tensor(x)
    if bn.channels != x.shape[1]:
        raise ShapeError(f"bn has {bn.channels} channels, input has {x.shape[1]}")
    scale, shift = bn.scale_shift()
    return (x * scale.astype(x.dtype)[None, :, None, None] + shift.astype(x.dtype)[None, :, None, None]).astype(x.dtype)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, mode: str = "relu") -> np.ndarray:
    if mode == "relu":
        return relu(x)
    if mode == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {mode!r}")


def maxpool2d(x, kernel: int, stride: int = None) -> np.ndarray:
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    if kernel != stride:
        raise ShapeError("only non-overlapping pooling (kernel == stride) is supported")
    B, C, H, W = x.shape
    if H % stride or W % stride:
        raise ShapeError(f"spatial dims {(H, W)} not divisible by {stride}")
    return x.reshape(B, C, H // stride, stride, W // stride, stride).max(axis=(3, 5))


def bilinear_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """``(n*factor, n)`` interpolation matrix for half-pixel bilinear upsampling."""
    m = np.zeros((n * factor, n), dtype=dtype)
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, None)
    i0 = np.minimum(np.floor(src).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x, factor: int) -> np.ndarray:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x.copy()
    ah = bilinear_matrix(x.shape[2], factor, x.dtype)
    aw = bilinear_matrix(x.shape[3], factor, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def combine(inputs: Sequence[np.ndarray], mode: str) -> np.ndarray:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("nothing to combine")
    if mode == "add":
        shape = inputs[0].shape
        if any(t.shape != shape for t in inputs):
            raise ShapeError(f"add needs identical shapes, got {[t.shape for t in inputs]}")
        out = inputs[0].copy()
        for t in inputs[1:]:
            out += t
        return out
    if mode == "concat_channels":
        ref = inputs[0].shape
        if any(t.shape[0] != ref[0] or t.shape[2:] != ref[2:] for t in inputs):
            raise ShapeError(f"concat needs matching batch/spatial dims, got {[t.shape for t in inputs]}")
        return np.concatenate(inputs, axis=1)
    raise ValueError(f"unknown combine mode {mode!r}")

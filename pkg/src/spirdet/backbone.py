"""Input stem, reparameterizable encoder, top-down fusion neck and the full model.

Stage 1 keeps the input resolution; every later stage opens with a stride-2
block.  The neck walks top-down from the deepest level: upsample the deeper
map 2x, concatenate with the same-level map, 3x3 conv + BN + ReLU back to the
level width, add to that level.  Only levels the decoder reads are fused.
"""
import copy
from dataclasses import dataclass, fields, is_dataclass
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from . import autograd as ag
from . import dbsd, layers
from .config import ModelConfig
from .dbsd import CoarseHeadParams, SparseHeadParams
from .layers import Conv, ConvBN, fold_conv_bn, layer_forward, make_conv_bn
from .repblocks import (Block, FusedBlockParams, RepBlockTrainParams, block_forward, fuse_block,
                        fused_param_count, make_repblock, train_param_count)
from .tensor_ops import BnParams, ShapeError

Layer = Union[ConvBN, Conv]


@dataclass
class SpirDetModel:
    config: ModelConfig
    stem: Layer
    stages: List[List[Block]]
    neck: Dict[int, Layer]
    coarse_head: CoarseHeadParams
    sparse_head: SparseHeadParams
    upsample: Conv

    @property
    def fused(self) -> bool:
        return isinstance(self.stem, Conv)

    def downsampling_banks(self) -> List[np.ndarray]:
        """Parallel stride-2 kernel banks ``(K, out, in, 3, 3)``, one per stage >= 2."""
        if self.fused:
            raise ValueError("fused models have no parallel banks")
        return [stage[0].depthwise.bank for stage in self.stages[1:]]


# ------------------------------------------------------------ construction


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SpirDetModel:
    """Training-form model, initialised deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    ch = config.channels_per_stage
    stem = make_conv_bn(rng, 1, ch[0], 3, dtype=dtype)
    stages = []
    cin = ch[0]
    for i, (nb, cout) in enumerate(zip(config.blocks_per_stage, ch)):
        blocks = []
        for j in range(nb):
            stride = 2 if (i > 0 and j == 0) else 1
            blocks.append(make_repblock(rng, cin, cout, stride, config.K, dtype))
            cin = cout
        stages.append(blocks)
    neck = {}
    for lvl in range(config.n_stages - 2, config.fine_level - 1, -1):
        neck[lvl] = make_conv_bn(rng, ch[lvl] + ch[lvl + 1], ch[lvl], 3, dtype=dtype)
    coarse = dbsd.make_coarse_head(rng, ch[config.coarse_level], config.coarse_width(), dtype)
    sparse = dbsd.make_sparse_head(rng, ch[config.fine_level], config.sparse_convs, config.head_width(), dtype)
    up = dbsd.make_upsample_conv(rng, config.head_width(), dtype=dtype)
    return SpirDetModel(config, stem, stages, neck, coarse, sparse, up)


def fuse_layer(layer: Layer) -> Conv:
    return fold_conv_bn(layer) if isinstance(layer, ConvBN) else layer


def fuse_model(model: SpirDetModel) -> SpirDetModel:
    """Inference form; shares no arrays with ``model``."""
    if model.fused:
        return model
    model = copy.deepcopy(model)
    return SpirDetModel(
        model.config,
        fuse_layer(model.stem),
        [[fuse_block(b) for b in stage] for stage in model.stages],
        {k: fuse_layer(v) for k, v in model.neck.items()},
        CoarseHeadParams(fuse_layer(model.coarse_head.conv), model.coarse_head.out),
        SparseHeadParams([fuse_layer(l) for l in model.sparse_head.layers], model.sparse_head.final),
        model.upsample,
    )


def randomize_bn(model: SpirDetModel, seed: int = 0, calibrate=None) -> SpirDetModel:
    """Give every BN random affine parameters and running statistics (in place).

    With ``calibrate`` (an input batch) the running statistics are instead set
    to the batch statistics of that input, which keeps deep random models out
    of saturation while still exercising non-trivial folding.
    """
    rng = np.random.default_rng(seed)
    for _, obj in _walk(model):
        if isinstance(obj, BnParams):
            shp, dt = obj.gamma.shape, obj.gamma.dtype
            obj.gamma[...] = rng.uniform(0.5, 1.5, shp).astype(dt)
            obj.beta[...] = rng.uniform(-0.2, 0.2, shp).astype(dt)
            obj.running_mean[...] = rng.uniform(-0.1, 0.1, shp).astype(dt)
            obj.running_var[...] = rng.uniform(0.5, 2.0, shp).astype(dt)
    if calibrate is not None:
        saved = layers.BN_MOMENTUM
        layers.BN_MOMENTUM = 1.0
        try:
            model_forward(model, np.asarray(calibrate, dtype=model.stem.weight.dtype), training=True)
        finally:
            layers.BN_MOMENTUM = saved
    return model


# ------------------------------------------------------- parameter walking


def _walk(obj, prefix="") -> Iterator[Tuple[str, object]]:
    yield prefix, obj
    if isinstance(obj, ModelConfig):
        return
    if is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            if f.name.startswith("_"):
                continue
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _walk(v, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from _walk(obj[k], f"{prefix}.{k}")


def named_arrays(model) -> List[Tuple[str, np.ndarray]]:
    """Every array of the model (parameters and BN buffers) in a stable order."""
    return [(name, obj) for name, obj in _walk(model) if isinstance(obj, np.ndarray)]


def is_buffer(name: str) -> bool:
    return name.endswith("running_mean") or name.endswith("running_var")


def named_parameters(model) -> List[Tuple[str, np.ndarray]]:
    return [(n, a) for n, a in named_arrays(model) if not is_buffer(n)]


def param_count(model) -> int:
    return sum(a.size for _, a in named_parameters(model))


def encoder_param_counts(model: SpirDetModel):
    counter = fused_param_count if model.fused else train_param_count
    return [counter(b) for stage in model.stages for b in stage]


# ----------------------------------------------------------------- forward


def stem_forward(x, stem: Layer, tape, training=False):
    return layer_forward(x, stem, tape, training, act="relu")


def encoder_forward_ag(x, model: SpirDetModel, tape, training=False):
    div = 2 ** (len(model.stages) - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"input {x.shape[2:]} not divisible by {div}")
    x = stem_forward(x, model.stem, tape, training)
    pyramid = []
    for stage in model.stages:
        for block in stage:
            x = block_forward(x, block, tape, training)
        pyramid.append(x)
    return pyramid


def neck_forward_ag(pyramid, neck: Dict[int, Layer], tape, training=False):
    out = list(pyramid)
    for lvl in sorted(neck, reverse=True):
        layer = neck[lvl]
        up = ag.upsample_bilinear(out[lvl + 1], 2)
        cat = ag.concat([up, out[lvl]], axis=1)
        if cat.shape[1] != layer.weight.shape[1] * layer.groups:
            raise ShapeError(f"neck level {lvl}: {cat.shape[1]} channels, params expect {layer.weight.shape[1]}")
        out[lvl] = ag.add(out[lvl], layer_forward(cat, layer, tape, training, act="relu"))
    return out


def model_forward(model: SpirDetModel, x, tape=None, training=False, alpha=None):
    """Full pass.  Returns ``(V, O, index)`` as autograd values."""
    tape = tape or ag.NoTape()
    cfg = model.config
    x = ag.const(x)
    if x.shape[1] != 1:
        raise ShapeError(f"expected a 1-channel image, got {x.shape[1]} channels")
    pyr = encoder_forward_ag(x, model, tape, training)
    pyr = neck_forward_ag(pyr, model.neck, tape, training)
    alpha = cfg.alpha if alpha is None else alpha
    return dbsd.dbsd_forward_ag(pyr[cfg.coarse_level], pyr[cfg.fine_level], alpha, model.coarse_head,
                                model.sparse_head, model.upsample, cfg.fine_ratio, tape, training)


# ------------------------------------------------------- numpy-facing API


def input_stem(x, stem: Layer) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"input stem takes (B, 1, H, W), got {x.shape}")
    return stem_forward(x, stem, ag.NoTape()).data


def encoder_forward(x, model: SpirDetModel) -> List[np.ndarray]:
    return [p.data for p in encoder_forward_ag(ag.const(np.asarray(x)), model, ag.NoTape())]


def neck_forward(pyramid, neck: Dict[int, Layer]) -> List[np.ndarray]:
    return [p.data for p in neck_forward_ag([ag.const(np.asarray(p)) for p in pyramid], neck, ag.NoTape())]


def predict(model: SpirDetModel, x, alpha=None):
    """Inference: returns numpy ``(V, O)``."""
    v, o, _ = model_forward(model, np.asarray(x), alpha=alpha)
    return v.data, o.data


def dbsd_forward(p_coarse, p_fine, alpha, model: SpirDetModel):
    v, o, _ = dbsd.dbsd_forward_ag(ag.const(np.asarray(p_coarse)), ag.const(np.asarray(p_fine)), alpha,
                                   model.coarse_head, model.sparse_head, model.upsample,
                                   model.config.fine_ratio, ag.NoTape())
    return v.data, o.data

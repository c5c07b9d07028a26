"""Sparse infrared small-target detection: reparameterizable encoder, dual-branch
sparse decoder, training and evaluation on numpy (with numba kernels)."""
from ._backend import backend_name
from .backbone import SpirDetModel, build_model, fuse_model, model_forward, predict, randomize_bn
from .config import ConfigError, ModelConfig, toy_config, variant_config
from .fileio import load_config, load_model, load_weights, save_config, save_model, save_weights
from .losses import LossBreakdown, soft_iou_loss, total_loss
from .metrics import DetectionReport, connected_components, detection_metrics

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DetectionReport", "LossBreakdown", "ModelConfig", "SpirDetModel", "backend_name",
    "build_model", "connected_components", "detection_metrics", "fuse_model", "load_config", "load_model",
    "load_weights", "model_forward", "predict", "randomize_bn", "save_config", "save_model", "save_weights",
    "soft_iou_loss", "toy_config", "total_loss", "variant_config",
]

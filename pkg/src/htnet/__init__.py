"""Topology-aware 2D-to-3D human pose lifting."""
from .model import ModelConfig, ModelParams, init_params, model_forward, param_count, predict_mm
from .skeleton import SkeletonSpec, build_h36m17

__all__ = [
    "ModelConfig", "ModelParams", "SkeletonSpec", "build_h36m17",
    "init_params", "model_forward", "param_count", "predict_mm",
]
__version__ = "0.1.0"

"""
DCMNet - Dynamic cross-modal routing for joint HSI + LiDAR classification

Patch pairs pass through two convolutional encoders and a stack of soft-routed
interaction blocks whose gates decide, per sample, which blocks feed which.
"""

__version__ = "0.1.0"

from .model import DCMNet, ModelConfig, build_model, layer_table, load_checkpoint, preset
from .preprocessing import SceneCube, generate_synthetic, load_dataset, prepare_dataset
from .routing import RoutingConfig, extract_paths
from .training import TrainConfig, evaluate, run_ablation, train

__all__ = [
    "DCMNet",
    "ModelConfig",
    "RoutingConfig",
    "TrainConfig",
    "SceneCube",
    "build_model",
    "preset",
    "layer_table",
    "load_checkpoint",
    "generate_synthetic",
    "load_dataset",
    "prepare_dataset",
    "train",
    "evaluate",
    "run_ablation",
    "extract_paths",
]

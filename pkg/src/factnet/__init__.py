"""Factorized scene-graph generation on synthetic geometric scenes."""

from .config import EvalConfig, GenConfig, ModelConfig, RunConfig, TrainConfig
from .geometry import Box, ScoredBox, iou, nms, union_box
from .graph import ConnectionGraph, factorize, factorize_arrays, graph_stats
from .model import FactorizableNet

__all__ = [
    "Box",
    "ConnectionGraph",
    "EvalConfig",
    "FactorizableNet",
    "GenConfig",
    "ModelConfig",
    "RunConfig",
    "ScoredBox",
    "TrainConfig",
    "factorize",
    "factorize_arrays",
    "graph_stats",
    "iou",
    "nms",
    "union_box",
]
__version__ = "0.1.0"

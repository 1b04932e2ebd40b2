"""Retrospective feature-pyramid refinement for point cloud semantic segmentation."""
from .config import RunConfig
from .geometry import KDTree, NeighborMap, PointCloud, knn_query
from .model import RetroFPN, Sample, prepare_sample
from .pyramid import PyramidLevel, build_pyramid
from .retro import Ablation, RetroParams, lca_forward, self_attention_top, sgu_forward, head_forward, retro_forward
from .tensor import Tensor

__all__ = [
    "Ablation", "KDTree", "NeighborMap", "PointCloud", "PyramidLevel", "RetroFPN", "RetroParams",
    "RunConfig", "Sample", "Tensor", "build_pyramid", "head_forward", "knn_query", "lca_forward",
    "prepare_sample", "retro_forward", "self_attention_top", "sgu_forward",
]
__version__ = "0.1.0"

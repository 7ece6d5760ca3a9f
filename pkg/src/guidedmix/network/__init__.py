from .layers import (
    adaptive_avg_pool_matrix,
    bilinear_resize_matrix,
    non_local_attention,
    non_local_attention_naive,
)
from .model import ModelConfig, SegModel
from .weights import load_backbone_weights, save_backbone_weights

__all__ = [
    "ModelConfig",
    "SegModel",
    "adaptive_avg_pool_matrix",
    "bilinear_resize_matrix",
    "non_local_attention",
    "non_local_attention_naive",
    "load_backbone_weights",
    "save_backbone_weights",
]

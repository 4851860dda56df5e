"""Structured channel and layer pruning toolkit for pre-activation bottleneck ResNets."""

from .engine import BNParams, ConvParams, FCParams, Tensor
from .graph import (
    ModelGraph,
    build_mini_resnet,
    build_resnet164,
    count_params,
    graph_backward,
    graph_forward,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "BNParams",
    "ConvParams",
    "FCParams",
    "ModelGraph",
    "Tensor",
    "build_mini_resnet",
    "build_resnet164",
    "count_params",
    "graph_backward",
    "graph_forward",
    "validate",
]

"""Linear bottleneck adapters for tiny vision backbones, and their lossless folding into frozen weights."""

from .adapters import (AdapterConfig, BaselineAdapter, GroupwiseLinear, PlacementSpec, RepAdapter,
                       attach_adapters, count_params)
from .checkpoint import load_model, save_model
from .nn import ConvLayer, ConvNet, Linear, MultiHeadAttention, VisionTransformer, ViTBlock
from .reparam import (CollapsedAdapter, MergeReport, NonMergeableError, collapse_adapter, densify,
                      merge_into_affine, merge_into_conv, merge_into_mha, merge_model)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "BaselineAdapter", "CollapsedAdapter", "ConvLayer", "ConvNet", "GroupwiseLinear", "Linear",
    "MergeReport", "MultiHeadAttention", "NonMergeableError", "PlacementSpec", "RepAdapter", "ViTBlock",
    "VisionTransformer", "attach_adapters", "collapse_adapter", "count_params", "densify", "load_model",
    "merge_into_affine", "merge_into_conv", "merge_into_mha", "merge_model", "save_model",
]

"""Sparse-to-dense interpolation with image-guided, sparsity-aware propagation."""
from .network import Model, ModelConfig, build_model, count_flops, count_params, toy_config
from .sparse import MaskedFeature
from .tensor import Graph, Parameter, Tensor

__version__ = "0.1.0"

"""Backpropagation-based visualizations on a small numpy CNN engine."""
from .kernels import BACKEND
from .network import (Conv, Dense, ExceptFor, Flatten, MaxPool, Network, ReLU, UpTo,
                      build, forward, load, save, splice_weights)
from .tensor import PatchPlan, RngSpec, cosine, gather_patches, sample, scatter_patches
from .visualize import VisMethod, VisResult, backward, normalize_for_display, relu_rule

__version__ = "0.1.0"

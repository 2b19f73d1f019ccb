"""Multi-task crowd counting: density-map regression with an auxiliary count-group classifier."""

from .estimators import CountGroupEncoder, DensityMapTransformer, MTCNetRegressor
from .groundtruth import CountRange, HeadAnnotation, KernelConfig, count_group_label, render_density_map
from .model import build, forward, load_weights, save_weights
from .tensor import Tensor, backward, grad_check, no_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CountGroupEncoder",
    "CountRange",
    "DensityMapTransformer",
    "HeadAnnotation",
    "KernelConfig",
    "MTCNetRegressor",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "count_group_label",
    "evaluate",
    "forward",
    "grad_check",
    "load_weights",
    "no_grad",
    "render_density_map",
    "save_weights",
    "train",
]

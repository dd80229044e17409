"""Point-cloud learning with dense contextual point convolutions."""

from .checkpoint import CheckpointError
from .data import Dataset, SyntheticShapeSpec, load_xyz_dir, make_synthetic, one_hot, save_xyz_dir
from .geometry import (
    NeighborhoodIndex,
    NeighborhoodSpec,
    PointCloud,
    augment,
    ball_query,
    farthest_point_sample,
    knn_query,
)
from .layers import Context, DensePointBlock, EPConv, PConv, PPool
from .networks import (
    CostReport,
    Network,
    NetworkConfig,
    build,
    build_classification,
    build_normal_estimation,
    build_segmentation,
    count_flops,
    count_params,
    depth_preset,
    layer_costs,
)
from .optim import Adam
from .tensor import ConfigError, Parameter, ShapeError, Tensor, backward, make_rng, no_grad
from .training import Metrics, TrainConfig, compute_miou, evaluate, evaluate_voting, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "augment",
    "backward",
    "ball_query",
    "build",
    "build_classification",
    "build_normal_estimation",
    "build_segmentation",
    "CheckpointError",
    "compute_miou",
    "ConfigError",
    "Context",
    "CostReport",
    "count_flops",
    "count_params",
    "Dataset",
    "DensePointBlock",
    "depth_preset",
    "EPConv",
    "evaluate",
    "evaluate_voting",
    "farthest_point_sample",
    "knn_query",
    "layer_costs",
    "load_xyz_dir",
    "make_rng",
    "make_synthetic",
    "Metrics",
    "NeighborhoodIndex",
    "NeighborhoodSpec",
    "Network",
    "NetworkConfig",
    "no_grad",
    "one_hot",
    "Parameter",
    "PConv",
    "PointCloud",
    "PPool",
    "save_xyz_dir",
    "ShapeError",
    "SyntheticShapeSpec",
    "Tensor",
    "train",
    "TrainConfig",
]

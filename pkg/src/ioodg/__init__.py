"""Point cloud classifier trained for invariance to rigid transforms and point dropping.

Set ``IOODG_NUMBA=0`` to run the pure-numpy kernels instead of the numba ones.
"""
from ._kernels import BACKEND
from .config import RunConfig, load_config, parse_config
from .data import build_benchmark, generate_shape, load_xyz, save_xyz
from .geometry import (
    AnchorSet,
    NeighborhoodSet,
    NonParamTransform,
    ParamTransform,
    PointCloud,
    apply_nonparam_transform,
    apply_param_transform,
    chamfer_distance,
    farthest_point_sample,
    invert_param_transform,
    radius_neighbors,
    sample_param_transform,
)
from .network import ModelConfig, forward_single, forward_two_branch, init_params
from .training import evaluate, fit, load_trained

__version__ = "0.1.0"

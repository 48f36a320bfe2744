"""Unsupervised depth and motion from 3-frame monocular sequences, on a small numpy autodiff engine.

Depth and motion are optimized directly per sample (no networks) against a
photometric objective with per-object motion, an object-size constraint and
online refinement. See the README for the command-line interface.
"""

from .geometry import Intrinsics, pose_to_matrix, matrix_to_pose
from .losses import LossWeights, total_loss
from .metrics import DepthEvalConfig, ate, depth_metrics
from .motion import InstanceMaskSet, SequenceSample, composite_warp
from .predictors import DirectModel
from .trainer import TrainConfig, fit, online_refine
from .warp import inverse_warp

__version__ = "0.1.0"

__all__ = [
    "Intrinsics", "pose_to_matrix", "matrix_to_pose", "LossWeights", "total_loss", "DepthEvalConfig", "ate",
    "depth_metrics", "InstanceMaskSet", "SequenceSample", "composite_warp", "DirectModel", "TrainConfig", "fit",
    "online_refine", "inverse_warp",
]

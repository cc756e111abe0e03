"""Multi-scale deeply supervised attention networks for keypoint heatmaps."""

__version__ = "0.1.0"

from .codec import Heatmap, KeypointSet, decode_keypoints, encode_heatmap, resize_heatmap
from .losses import LossWeights, composite_loss
from .metrics import MetricsReport, mpjpe, pck, pck_curve
from .network import MSDSNet, NetworkConfig, NetworkOutput, count_parameters

__all__ = [
    "Heatmap", "KeypointSet", "decode_keypoints", "encode_heatmap", "resize_heatmap",
    "LossWeights", "composite_loss", "MetricsReport", "mpjpe", "pck", "pck_curve",
    "MSDSNet", "NetworkConfig", "NetworkOutput", "count_parameters",
]

"""Lightened CNN face representation with Max-Feature-Map activations."""

from .layers import mfm_backward, mfm_forward, softmax_cross_entropy
from .protocols import (
    ScoreSet,
    closed_set_rank1,
    cosine_similarity,
    open_set_dir_far,
    tpr_at_far,
    verification_10fold,
    ytf_video_similarity,
)
from .zoo import build_network, build_network_a, build_network_b, count_parameters, init_weights

__version__ = "0.1.0"

__all__ = [
    "ScoreSet", "build_network", "build_network_a", "build_network_b", "closed_set_rank1",
    "cosine_similarity", "count_parameters", "init_weights", "mfm_backward", "mfm_forward",
    "open_set_dir_far", "softmax_cross_entropy", "tpr_at_far", "verification_10fold",
    "ytf_video_similarity",
]

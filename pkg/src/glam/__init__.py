"""Joint graph learning and matching on keypoint sets.

A stack of self-attention layers (learning a weighted graph over each
keypoint set) and Sinkhorn-normalized cross-attention layers (producing a
soft assignment between the sets) trained end to end with a weighted
cross entropy, discretized by the Hungarian method at inference, plus
extraction of the learnt category-level graph patterns.
"""

__version__ = "0.1.0"

from .assignment import (Permutation, SoftAssignment, hungarian,
                         matching_accuracy, pad_to_common_size, qap_score,
                         sinkhorn_array, sinkhorn_converged,
                         sinkhorn_normalize)
from .attention import (ForwardTrace, GlamParameters, NetworkConfig,
                        PointFeatureSet, encode_positions, forward,
                        load_checkpoint, save_checkpoint)
from .diffcore import Tape, Tensor, backward
from .pattern import (LearntPattern, aggregate_category,
                      extract_sample_adjacency, export_heatmap,
                      filter_top_edges, pattern_recovery_score)
from .synthdata import (CategoryTemplate, CorrespondenceSample, GenConfig,
                        SynthDataset, generate_dataset, load_dataset,
                        make_template, sample_pair, save_dataset)
from .training import (DivergenceError, TrainConfig, TrainReport, evaluate,
                       gradient_check, train, weighted_bce_loss)

__all__ = [
    "Tape", "Tensor", "backward",
    "NetworkConfig", "PointFeatureSet", "GlamParameters", "ForwardTrace",
    "encode_positions", "forward", "save_checkpoint", "load_checkpoint",
    "SoftAssignment", "Permutation", "sinkhorn_normalize", "sinkhorn_array",
    "sinkhorn_converged", "hungarian", "pad_to_common_size", "qap_score",
    "matching_accuracy",
    "TrainConfig", "TrainReport", "DivergenceError", "weighted_bce_loss",
    "train", "evaluate", "gradient_check",
    "CategoryTemplate", "GenConfig", "CorrespondenceSample", "SynthDataset",
    "make_template", "sample_pair", "generate_dataset", "save_dataset",
    "load_dataset",
    "LearntPattern", "extract_sample_adjacency", "aggregate_category",
    "filter_top_edges", "export_heatmap", "pattern_recovery_score",
]

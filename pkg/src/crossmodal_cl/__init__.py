"""Graph-debiased cross-modal contrastive learning for question answering, at toy scale."""

__version__ = "0.1.0"

from .data_synth import Dataset, SyntheticSpec, generate, oracle_false_negative
from .graph import NeighborGraph, build_knn_graph, negatives_for, positives_for
from .losses import (
    AlignmentMap,
    ContrastiveConfig,
    EmbeddingBatch,
    LossReport,
    infonce_graph,
    infonce_multipos,
    infonce_vanilla,
    joint_loss,
    similarity_h,
    supervised_ce,
)
from .model import ModelSpec, ToyModel, init_params
from .trainer import TrainConfig, coarse_triplet_cl, evaluate, probe_false_negatives, train

__all__ = [
    "AlignmentMap",
    "ContrastiveConfig",
    "Dataset",
    "EmbeddingBatch",
    "LossReport",
    "ModelSpec",
    "NeighborGraph",
    "SyntheticSpec",
    "ToyModel",
    "TrainConfig",
    "build_knn_graph",
    "coarse_triplet_cl",
    "evaluate",
    "generate",
    "infonce_graph",
    "infonce_multipos",
    "infonce_vanilla",
    "init_params",
    "joint_loss",
    "negatives_for",
    "oracle_false_negative",
    "positives_for",
    "probe_false_negatives",
    "similarity_h",
    "supervised_ce",
    "train",
]

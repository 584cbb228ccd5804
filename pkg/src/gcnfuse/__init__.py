"""Graph convolutional classification over instance-similarity graphs.

Images are encoded by a small CNN, instances whose encodings are similar are
linked, and a GCN classifies nodes from their (imputed) metadata features.
"""

from .gcn import AGGREGATIONS, GcnModel, TrainConfig, predict, train
from .graph import InstanceGraph, assemble_graph, build_similarity, threshold_graph
from .metrics import evaluate, per_class_metrics
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "AGGREGATIONS",
    "GcnModel",
    "InstanceGraph",
    "SyntheticSpec",
    "TrainConfig",
    "assemble_graph",
    "build_similarity",
    "evaluate",
    "generate_synthetic",
    "per_class_metrics",
    "predict",
    "threshold_graph",
    "train",
]

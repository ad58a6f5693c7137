"""Hierarchical graph classification with differentiable pooling, on NumPy."""

from __future__ import annotations

__version__ = "0.1.0"

from .graphs import Dataset, Graph, augment_dataset, parse_tu_dataset, stratified_kfold
from .model import HierarchicalModel, ModelConfig, build_model, forward, total_loss
from .pooling import DiffPoolLayer, diffpool_forward, link_prediction_loss, pool
from .synth import planted_hierarchy_dataset
from .training import TrainConfig, cross_validate, train_fold

__all__ = [
    "__version__",
    "Dataset", "Graph", "augment_dataset", "parse_tu_dataset", "stratified_kfold",
    "HierarchicalModel", "ModelConfig", "build_model", "forward", "total_loss",
    "DiffPoolLayer", "diffpool_forward", "link_prediction_loss", "pool",
    "planted_hierarchy_dataset",
    "TrainConfig", "cross_validate", "train_fold",
]

"""Structured mesh quality evaluation with graph neural networks."""

from .errors import DataError, MeshgradeError, NumericError, UsageError
from .graph import SparseGraph, build_element_graph, build_point_graph
from .layers import ModelConfig, MQENet, forward
from .mesh import StructuredMesh, cell_features, load_mesh, mesh_quality_report
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "MeshgradeError",
    "MQENet",
    "ModelConfig",
    "NumericError",
    "SparseGraph",
    "StructuredMesh",
    "TrainConfig",
    "UsageError",
    "build_element_graph",
    "build_point_graph",
    "cell_features",
    "evaluate",
    "forward",
    "load_mesh",
    "mesh_quality_report",
    "train",
]

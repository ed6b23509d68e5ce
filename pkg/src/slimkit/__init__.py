"""slimkit: structured channel pruning for small convolutional detector
graphs, detection metrics, a desk-scale bench, and a gesture-driven media
controller."""

from .graph import GraphModel, NodeSpec, load_graph, save_graph
from .pruner import PruneConfig, SparseConfig, prune

__all__ = [
    "GraphModel", "NodeSpec", "load_graph", "save_graph",
    "PruneConfig", "SparseConfig", "prune",
]

__version__ = "0.1.0"

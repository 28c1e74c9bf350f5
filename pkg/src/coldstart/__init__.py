"""Pre-training pipeline for cold-start recommendation on bipartite
interaction graphs."""

__version__ = "0.1.0"

from .config import ExperimentConfig, build_config
from .data import BipartiteGraph, build_graph, load_interactions

__all__ = [
    "ExperimentConfig",
    "build_config",
    "BipartiteGraph",
    "build_graph",
    "load_interactions",
    "__version__",
]

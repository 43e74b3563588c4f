"""Neighbor averaging over relation subgraphs (NARS) for heterogeneous graphs."""
from .config import NarsConfig, load_config
from .hetgraph import FeatureMatrix, HeteroGraph, LabelSet, load_graph
from .metagraph import RelationSubset, extract_subgraph, valid_subsets
from .model import NarsModel, aggregate
from .propagate import HopFeatureTensor, gen_neighbor_features

__version__ = "0.1.0"

__all__ = [
    "FeatureMatrix", "HeteroGraph", "HopFeatureTensor", "LabelSet", "NarsConfig", "NarsModel",
    "RelationSubset", "aggregate", "extract_subgraph", "gen_neighbor_features", "load_config",
    "load_graph", "valid_subsets",
]

"""Spatial functional clustering of areal time series.

Clusters are spatially contiguous groups obtained by cutting edges of a
spanning tree of the region adjacency graph. Each cluster shares a latent
temporal curve modelled as a latent Gaussian field, whose marginal
likelihood is approximated by nested Laplace integration and drives a
Metropolis-Hastings sampler over partitions.
"""

from .graph import Partition, SpanningTree, SpatialGraph, build_graph, derive_partition, minimum_spanning_tree
from .laplace import LaplaceConfig, conditional_posterior, find_mode, integrate_hyperparameters, log_marginal_given_theta
from .lgm import ClusterData, HyperParams, LatentComponent, ModelSpec
from .moves import MoveConfig
from .posterior import (
    adjusted_rand_index,
    cocluster_matrix,
    compare_partitions,
    dahl_point_estimate,
    normalized_information_distance,
    relabel_by_size,
)
from .sampler import Panel, RunConfig, composition_sample, run_chain

__version__ = "0.1.0"

__all__ = [
    "ClusterData",
    "HyperParams",
    "LaplaceConfig",
    "LatentComponent",
    "ModelSpec",
    "MoveConfig",
    "Panel",
    "Partition",
    "RunConfig",
    "SpanningTree",
    "SpatialGraph",
    "adjusted_rand_index",
    "build_graph",
    "cocluster_matrix",
    "compare_partitions",
    "composition_sample",
    "conditional_posterior",
    "dahl_point_estimate",
    "derive_partition",
    "find_mode",
    "integrate_hyperparameters",
    "log_marginal_given_theta",
    "minimum_spanning_tree",
    "normalized_information_distance",
    "relabel_by_size",
    "run_chain",
]

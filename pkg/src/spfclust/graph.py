"""Region adjacency graphs, spanning trees and the partitions they induce.

Edges are stored as ``(i, j)`` tuples with ``i < j``. A partition is the set of
connected components left after deleting ``C - 1`` edges from a spanning tree;
cluster labels are canonical (the component holding the smallest region index
is cluster 0, and so on).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DisconnectedGraph,
    DuplicateEdge,
    EdgeNotInTree,
    IndexOutOfRange,
    MissingWeight,
    SelfLoop,
)

Edge = tuple[int, int]


def normalize_edge(u: int, v: int) -> Edge:
    u, v = int(u), int(v)
    return (u, v) if u < v else (v, u)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb
        return True


def _components(n: int, edges: Iterable[Edge]) -> np.ndarray:
    """Canonical component labels: numbered in order of their smallest node."""
    ds = _DisjointSet(n)
    for u, v in edges:
        ds.union(u, v)
    labels = np.empty(n, dtype=np.int64)
    root_label: dict[int, int] = {}
    for i in range(n):
        r = ds.find(i)
        if r not in root_label:
            root_label[r] = len(root_label)
        labels[i] = root_label[r]
    return labels


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    n_regions: int
    edges: tuple[Edge, ...]
    region_ids: tuple[str, ...] | None = None

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.n_regions)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def edge_index(self) -> dict[Edge, int]:
        return {e: k for k, e in enumerate(self.edges)}

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return normalize_edge(u, v) in self.edge_index

    def label(self, i: int) -> str:
        return self.region_ids[i] if self.region_ids is not None else str(i)


def build_graph(
    n_regions: int,
    edges: Iterable[Sequence[int]],
    region_ids: Sequence[str] | None = None,
) -> SpatialGraph:
    """Validate an edge list and return a connected :class:`SpatialGraph`.

    Raises
    ------
    SelfLoop, DuplicateEdge, IndexOutOfRange
        For malformed edge lists.
    DisconnectedGraph
        If the graph has more than one connected component; the exception
        carries the components.
    """
    n_regions = int(n_regions)
    if n_regions < 2:
        raise ValueError("a spatial graph needs at least two regions")
    if region_ids is not None:
        region_ids = tuple(str(r) for r in region_ids)
        if len(region_ids) != n_regions:
            raise ValueError("region_ids must have length n_regions")
        if len(set(region_ids)) != n_regions:
            raise ValueError("region_ids must be unique")

    seen: set[Edge] = set()
    ordered: list[Edge] = []
    for raw in edges:
        u, v = int(raw[0]), int(raw[1])
        if u == v:
            raise SelfLoop(f"self-loop at region {u}")
        if not (0 <= u < n_regions and 0 <= v < n_regions):
            raise IndexOutOfRange(f"edge ({u}, {v}) outside 0..{n_regions - 1}")
        e = normalize_edge(u, v)
        if e in seen:
            raise DuplicateEdge(f"duplicate edge {e}")
        seen.add(e)
        ordered.append(e)
    if not ordered:
        raise ValueError("edge list is empty")
    ordered.sort()

    labels = _components(n_regions, ordered)
    n_comp = int(labels.max()) + 1
    if n_comp > 1:
        comps = [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]
        raise DisconnectedGraph(comps)
    return SpatialGraph(n_regions, tuple(ordered), region_ids)


@dataclass(frozen=True, eq=False)
class SpanningTree:
    parent_graph: SpatialGraph
    tree_edges: tuple[Edge, ...]

    @property
    def n_regions(self) -> int:
        return self.parent_graph.n_regions

    @cached_property
    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.tree_edges)


def _weight_vector(graph: SpatialGraph, weights) -> np.ndarray:
    if isinstance(weights, Mapping):
        w = np.empty(graph.n_edges)
        for k, e in enumerate(graph.edges):
            if e in weights:
                w[k] = weights[e]
            elif (e[1], e[0]) in weights:
                w[k] = weights[(e[1], e[0])]
            else:
                raise MissingWeight(f"no weight for edge {e}")
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (graph.n_edges,):
            raise MissingWeight(
                f"expected {graph.n_edges} weights aligned with graph.edges, got shape {w.shape}"
            )
    if not np.all(np.isfinite(w)):
        raise ValueError("edge weights must be finite")
    return w


def minimum_spanning_tree(graph: SpatialGraph, weights) -> SpanningTree:
    """Kruskal's algorithm.

    ``weights`` is either a mapping ``edge -> weight`` or an array aligned with
    ``graph.edges``. Equal weights are resolved by lexicographic edge order,
    so the result is a deterministic function of the weights.
    """
    w = _weight_vector(graph, weights)
    # graph.edges is already sorted lexicographically; a stable sort keeps that order on ties
    order = np.argsort(w, kind="stable")
    ds = _DisjointSet(graph.n_regions)
    chosen: list[Edge] = []
    for k in order:
        u, v = graph.edges[k]
        if ds.union(u, v):
            chosen.append((u, v))
            if len(chosen) == graph.n_regions - 1:
                break
    return SpanningTree(graph, tuple(sorted(chosen)))


@dataclass(frozen=True, eq=False)
class Partition:
    tree: SpanningTree
    removed_edges: frozenset[Edge]
    membership: np.ndarray
    n_clusters: int

    @property
    def n_regions(self) -> int:
        return self.tree.n_regions

    @cached_property
    def members(self) -> tuple[tuple[int, ...], ...]:
        groups: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for i, c in enumerate(self.membership):
            groups[c].append(i)
        return tuple(tuple(g) for g in groups)

    @cached_property
    def keys(self) -> frozenset[tuple[int, ...]]:
        return frozenset(self.members)

    def cluster_of(self, region: int) -> int:
        return int(self.membership[region])

    @cached_property
    def within_edges(self) -> tuple[Edge, ...]:
        return tuple(e for e in self.tree.tree_edges if e not in self.removed_edges)

    @cached_property
    def between_edges(self) -> tuple[Edge, ...]:
        return tuple(sorted(self.removed_edges))

    def same_grouping(self, other: "Partition") -> bool:
        return bool(np.array_equal(self.membership, other.membership))


def derive_partition(tree: SpanningTree, removed_edges: Iterable[Sequence[int]]) -> Partition:
    removed = frozenset(normalize_edge(*e) for e in removed_edges)
    missing = removed - tree.edge_set
    if missing:
        raise EdgeNotInTree(f"edges not in tree: {sorted(missing)}")
    kept = [e for e in tree.tree_edges if e not in removed]
    labels = _components(tree.n_regions, kept)
    labels.setflags(write=False)
    return Partition(tree, removed, labels, len(removed) + 1)


def classify_tree_edges(partition: Partition) -> tuple[list[Edge], list[Edge]]:
    """Split the tree edges into (within-cluster, between-cluster) lists."""
    return list(partition.within_edges), list(partition.between_edges)


def is_cluster_connected(graph: SpatialGraph, members: Sequence[int]) -> bool:
    """BFS check that ``members`` induce a connected subgraph of ``graph``."""
    member_set = set(int(m) for m in members)
    if not member_set:
        return False
    start = next(iter(member_set))
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors[u]:
            if v in member_set and v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(member_set)


def check_partition(partition: Partition) -> None:
    """Assert every partition invariant; raises AssertionError on violation."""
    graph = partition.tree.parent_graph
    n = graph.n_regions
    m = partition.membership
    assert m.shape == (n,)
    assert len(partition.removed_edges) == partition.n_clusters - 1
    assert set(np.unique(m).tolist()) == set(range(partition.n_clusters))
    # canonical labelling: first appearance order
    first = [int(np.flatnonzero(m == c)[0]) for c in range(partition.n_clusters)]
    assert first == sorted(first)
    assert partition.removed_edges <= partition.tree.edge_set
    for members in partition.members:
        assert is_cluster_connected(graph, members)
    for u, v in partition.removed_edges:
        assert m[u] != m[v]


def partition_from_membership(graph: SpatialGraph, membership: Sequence[int], rng=None) -> Partition:
    """Build a tree-backed partition reproducing a given contiguous grouping.

    Within-cluster graph edges get weights in [0, 1) and between-cluster edges
    weights in [1, 2), so the MST spans every cluster before joining them.
    """
    labels = np.asarray(membership)
    if labels.shape != (graph.n_regions,):
        raise ValueError("membership length must equal n_regions")
    rng = np.random.default_rng(0) if rng is None else rng
    w = rng.uniform(0.0, 1.0, size=graph.n_edges)
    between = np.array([labels[u] != labels[v] for u, v in graph.edges])
    w = w + between
    tree = minimum_spanning_tree(graph, w)
    removed = [e for e in tree.tree_edges if labels[e[0]] != labels[e[1]]]
    part = derive_partition(tree, removed)
    if part.n_clusters != len(np.unique(labels)):
        raise ValueError("membership has a cluster that is not connected in the graph")
    return part


def canonical_labels(membership: Sequence[int]) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    out = np.empty(len(membership), dtype=np.int64)
    mapping: dict = {}
    for i, c in enumerate(membership):
        if c not in mapping:
            mapping[c] = len(mapping)
        out[i] = mapping[c]
    return out


def bfs_components(n: int, edges: Iterable[Edge]) -> list[set[int]]:
    """Plain BFS connected components, used as an independent oracle."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp = {s}
        seen[s] = True
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.add(v)
                    queue.append(v)
        comps.append(comp)
    return comps


__all__ = [
    "Edge",
    "SpatialGraph",
    "SpanningTree",
    "Partition",
    "build_graph",
    "minimum_spanning_tree",
    "derive_partition",
    "classify_tree_edges",
    "check_partition",
    "is_cluster_connected",
    "partition_from_membership",
    "canonical_labels",
    "bfs_components",
    "normalize_edge",
]

"""Birth, death, change and hyper proposals over spanning-tree partitions.

Edge choices are uniform: a birth cuts one of the ``n - C`` within-cluster
tree edges, a death re-inserts one of the ``C - 1`` removed edges, and a change
is a death followed by a birth on the merged state. The move kind is drawn
from ``(r_birth, r_death, r_change, r_hyper)`` restricted to the kinds that are
feasible at the current number of clusters and renormalised, so the transition
ratio of a move carries the renormalisation of both endpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import InvalidQ, NoEligibleEdge
from .graph import Partition, SpanningTree, derive_partition, minimum_spanning_tree

MOVE_KINDS = ("birth", "death", "change", "hyper")


@dataclass(frozen=True)
class MoveConfig:
    r_birth: float = 0.35
    r_death: float = 0.35
    r_change: float = 0.2
    r_hyper: float = 0.1
    q: float = 0.5
    # include the 1 / binom(n - 1, C - 1) uniform-partition term in prior ratios
    partition_prior_term: bool = True
    # keep the initial spanning tree; hyper moves are then never proposed
    fixed_tree: bool = False

    def __post_init__(self):
        probs = self.probabilities_raw
        if any((not math.isfinite(p)) or p < 0 for p in probs):
            raise ValueError(f"move probabilities must be non-negative, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"move probabilities must sum to 1, got {sum(probs)!r}")
        if not (0.0 <= self.q < 1.0):
            raise InvalidQ(f"q must lie in [0, 1), got {self.q}")

    @property
    def probabilities_raw(self) -> tuple[float, float, float, float]:
        return (self.r_birth, self.r_death, self.r_change, self.r_hyper)

    @classmethod
    def from_list(cls, move_probs, q: float = 0.5, **kwargs) -> "MoveConfig":
        rb, rd, rc, rh = (float(p) for p in move_probs)
        return cls(rb, rd, rc, rh, q=q, **kwargs)


@dataclass(frozen=True)
class MoveProposal:
    move_kind: str
    old_partition: Partition
    new_partition: Partition
    new_tree: SpanningTree
    log_prior_ratio: float
    log_transition_ratio: float
    affected_clusters_old: frozenset[int]
    affected_clusters_new: frozenset[int]
    log_q_forward: float = 0.0
    log_q_reverse: float = 0.0

    @property
    def old_keys(self) -> list[tuple[int, ...]]:
        return [self.old_partition.members[c] for c in sorted(self.affected_clusters_old)]

    @property
    def new_keys(self) -> list[tuple[int, ...]]:
        return [self.new_partition.members[c] for c in sorted(self.affected_clusters_new)]


def feasible_kinds(n_clusters: int, n_regions: int, config: MoveConfig) -> tuple[str, ...]:
    kinds = []
    if n_clusters < n_regions:
        kinds.append("birth")
    if n_clusters > 1:
        kinds.append("death")
    if 1 < n_clusters < n_regions:
        kinds.append("change")
    if not config.fixed_tree:
        kinds.append("hyper")
    return tuple(kinds)


def kind_probabilities(n_clusters: int, n_regions: int, config: MoveConfig) -> dict[str, float]:
    """Move-kind probabilities at a state with ``n_clusters`` clusters."""
    raw = dict(zip(MOVE_KINDS, config.probabilities_raw))
    feas = feasible_kinds(n_clusters, n_regions, config)
    total = sum(raw[k] for k in feas)
    if total <= 0.0:
        raise NoEligibleEdge(
            f"no move kind with positive probability is feasible at C={n_clusters}, n={n_regions}"
        )
    return {k: (raw[k] / total if k in feas else 0.0) for k in MOVE_KINDS}


def _log_kind_prob(kind: str, n_clusters: int, n_regions: int, config: MoveConfig) -> float:
    p = kind_probabilities(n_clusters, n_regions, config)[kind]
    return math.log(p) if p > 0 else -math.inf


def select_move_kind(partition: Partition, config: MoveConfig, rng: np.random.Generator) -> str:
    probs = kind_probabilities(partition.n_clusters, partition.n_regions, config)
    p = np.array([probs[k] for k in MOVE_KINDS])
    return MOVE_KINDS[int(rng.choice(len(MOVE_KINDS), p=p))]


def log_prior_ratio(c_old: int, c_new: int, q: float, n_regions: int | None = None) -> float:
    """Log prior ratio of the cluster structure for a move ``c_old -> c_new``.

    The geometric prior on the number of clusters contributes
    ``(c_new - c_old) * log(1 - q)``. When ``n_regions`` is given, the uniform
    conditional prior on which ``C - 1`` of the ``n - 1`` tree edges are cut
    adds ``log binom(n-1, c_old-1) - log binom(n-1, c_new-1)``.
    """
    if not (0.0 <= q < 1.0):
        raise InvalidQ(f"q must lie in [0, 1), got {q}")
    if c_old < 1 or c_new < 1:
        raise ValueError("cluster counts must be >= 1")
    out = (c_new - c_old) * math.log1p(-q)
    if n_regions is not None and c_new != c_old:
        out += _log_binom(n_regions - 1, c_old - 1) - _log_binom(n_regions - 1, c_new - 1)
    return out


def _log_binom(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def _prior_ratio(partition: Partition, c_new: int, config: MoveConfig) -> float:
    n = partition.n_regions if config.partition_prior_term else None
    return log_prior_ratio(partition.n_clusters, c_new, config.q, n)


def _affected(old: Partition, new: Partition) -> tuple[frozenset[int], frozenset[int]]:
    old_keys, new_keys = old.keys, new.keys
    a_old = frozenset(c for c, m in enumerate(old.members) if m not in new_keys)
    a_new = frozenset(c for c, m in enumerate(new.members) if m not in old_keys)
    return a_old, a_new


def log_birth_prob(partition: Partition, config: MoveConfig) -> float:
    """Log probability of proposing one specific birth from ``partition``."""
    n, c = partition.n_regions, partition.n_clusters
    return _log_kind_prob("birth", c, n, config) - math.log(n - c)


def log_death_prob(partition: Partition, config: MoveConfig) -> float:
    """Log probability of proposing one specific death from ``partition``."""
    n, c = partition.n_regions, partition.n_clusters
    return _log_kind_prob("death", c, n, config) - math.log(c - 1)


def log_change_prob(partition: Partition, config: MoveConfig) -> float:
    n, c = partition.n_regions, partition.n_clusters
    return _log_kind_prob("change", c, n, config) - math.log(c - 1) - math.log(n - c + 1)


def _build(kind, old, new, prior, log_fwd, log_rev) -> MoveProposal:
    a_old, a_new = _affected(old, new)
    return MoveProposal(
        move_kind=kind,
        old_partition=old,
        new_partition=new,
        new_tree=new.tree,
        log_prior_ratio=prior,
        log_transition_ratio=log_rev - log_fwd,
        affected_clusters_old=a_old,
        affected_clusters_new=a_new,
        log_q_forward=log_fwd,
        log_q_reverse=log_rev,
    )


def birth_with_edge(partition: Partition, edge, config: MoveConfig) -> MoveProposal:
    if edge not in partition.within_edges:
        raise NoEligibleEdge(f"edge {edge} is not a within-cluster tree edge")
    new = derive_partition(partition.tree, partition.removed_edges | {edge})
    return _build(
        "birth", partition, new, _prior_ratio(partition, new.n_clusters, config),
        log_birth_prob(partition, config), log_death_prob(new, config),
    )


def death_with_edge(partition: Partition, edge, config: MoveConfig) -> MoveProposal:
    if edge not in partition.removed_edges:
        raise NoEligibleEdge(f"edge {edge} is not a removed edge")
    new = derive_partition(partition.tree, partition.removed_edges - {edge})
    return _build(
        "death", partition, new, _prior_ratio(partition, new.n_clusters, config),
        log_death_prob(partition, config), log_birth_prob(new, config),
    )


def change_with_edges(partition: Partition, death_edge, birth_edge, config: MoveConfig) -> MoveProposal:
    if death_edge not in partition.removed_edges:
        raise NoEligibleEdge(f"edge {death_edge} is not a removed edge")
    merged = partition.removed_edges - {death_edge}
    if birth_edge in merged or birth_edge not in partition.tree.edge_set:
        raise NoEligibleEdge(f"edge {birth_edge} is not a within-cluster edge after the merge")
    new = derive_partition(partition.tree, merged | {birth_edge})
    return _build(
        "change", partition, new, 0.0,
        log_change_prob(partition, config), log_change_prob(new, config),
    )


def propose_birth(partition: Partition, config: MoveConfig, rng: np.random.Generator) -> MoveProposal:
    within = partition.within_edges
    if not within:
        raise NoEligibleEdge("every tree edge is already cut (C = n)")
    edge = within[int(rng.integers(len(within)))]
    return birth_with_edge(partition, edge, config)


def propose_death(partition: Partition, config: MoveConfig, rng: np.random.Generator) -> MoveProposal:
    removed = partition.between_edges
    if not removed:
        raise NoEligibleEdge("no removed edge to re-insert (C = 1)")
    edge = removed[int(rng.integers(len(removed)))]
    return death_with_edge(partition, edge, config)


def propose_change(partition: Partition, config: MoveConfig, rng: np.random.Generator) -> MoveProposal:
    if not (1 < partition.n_clusters < partition.n_regions):
        raise NoEligibleEdge(f"change needs 1 < C < n, got C={partition.n_clusters}")
    removed = partition.between_edges
    death_edge = removed[int(rng.integers(len(removed)))]
    merged = partition.removed_edges - {death_edge}
    within = [e for e in partition.tree.tree_edges if e not in merged]
    birth_edge = within[int(rng.integers(len(within)))]
    return change_with_edges(partition, death_edge, birth_edge, config)


def propose_hyper(partition: Partition, rng: np.random.Generator) -> MoveProposal:
    """Redraw the spanning tree keeping the current grouping.

    Within-cluster graph edges get U(0, 1) weights and between-cluster edges
    U(1, 2), so Kruskal spans every cluster before it crosses any boundary
    and exactly ``C - 1`` tree edges join different clusters.
    """
    graph = partition.tree.parent_graph
    m = partition.membership
    w = rng.uniform(0.0, 1.0, size=graph.n_edges)
    w += np.fromiter((m[u] != m[v] for u, v in graph.edges), dtype=float, count=graph.n_edges)
    tree = minimum_spanning_tree(graph, w)
    removed = [e for e in tree.tree_edges if m[e[0]] != m[e[1]]]
    new = derive_partition(tree, removed)
    if not np.array_equal(new.membership, m):  # pragma: no cover - guaranteed by the weights
        raise AssertionError("hyper move changed the partition")
    return MoveProposal(
        move_kind="hyper",
        old_partition=partition,
        new_partition=new,
        new_tree=tree,
        log_prior_ratio=0.0,
        log_transition_ratio=0.0,
        affected_clusters_old=frozenset(),
        affected_clusters_new=frozenset(),
    )


def propose(kind: str, partition: Partition, config: MoveConfig, rng: np.random.Generator) -> MoveProposal:
    if kind == "birth":
        return propose_birth(partition, config, rng)
    if kind == "death":
        return propose_death(partition, config, rng)
    if kind == "change":
        return propose_change(partition, config, rng)
    if kind == "hyper":
        return propose_hyper(partition, rng)
    raise ValueError(f"unknown move kind {kind!r}")

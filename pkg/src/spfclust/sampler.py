"""Metropolis-Hastings over spanning-tree partitions with per-cluster marginal caching.

A proposal only changes the clusters it splits or merges, so the acceptance
ratio needs the marginal likelihood of the new clusters and the cached
values of the old ones; every other cluster cancels.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MissingMarginal, NoConvergence, TraceCorrupt
from .graph import Partition, SpatialGraph, check_partition, derive_partition, minimum_spanning_tree, SpanningTree
from .laplace import DEFAULT_CONFIG, LaplaceConfig, LatentSummary, conditional_posterior, integrate_hyperparameters
from .lgm import ClusterData, ModelSpec
from .moves import MOVE_KINDS, MoveConfig, MoveProposal, propose, select_move_kind

log = logging.getLogger(__name__)

Key = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Panel:
    """Observations for every region: ``y`` and ``offset`` are ``n x T``."""

    y: np.ndarray
    offset: np.ndarray
    population: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        off = np.asarray(self.offset, dtype=float)
        if y.ndim != 2 or off.shape != y.shape:
            raise ValueError(f"y and offset must be matching n x T arrays, got {y.shape} and {off.shape}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offset", off)

    @property
    def n_regions(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def cluster(self, members: Sequence[int]) -> ClusterData:
        idx = np.asarray(members, dtype=np.int64)
        return ClusterData(self.y[idx], self.offset[idx], tuple(idx.tolist()))


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 2000
    burn_in_fraction: float = 0.5
    c0: int = 15
    seed: int = 0
    moves: MoveConfig = field(default_factory=MoveConfig)
    laplace: LaplaceConfig = DEFAULT_CONFIG
    # reject a proposal whose inner Newton loop fails instead of aborting the run
    tolerate_nonconverged: bool = True
    # optional LRU bound on the marginal cache; current clusters are never evicted
    cache_max_entries: int | None = None
    # check every partition invariant every 50 iterations
    debug_checks: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0.0 <= self.burn_in_fraction < 1.0):
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.c0 < 1:
            raise ValueError("c0 must be >= 1")

    def echo(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class CacheEntry:
    log_marginal: float
    theta_mode: dict
    newton_iters: int = 0
    fallback: bool = False


class MarginalCache:
    """Log marginal likelihoods keyed by the sorted member tuple of a cluster."""

    def __init__(self, max_entries: int | None = None):
        self.entries: OrderedDict[Key, CacheEntry] = OrderedDict()
        self.max_entries = max_entries
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(members: Iterable[int]) -> Key:
        return tuple(sorted(int(m) for m in members))

    def __contains__(self, members) -> bool:
        return self.key(members) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, members) -> CacheEntry | None:
        k = self.key(members)
        entry = self.entries.get(k)
        if entry is not None:
            self.entries.move_to_end(k)
        return entry

    def value(self, members) -> float:
        entry = self.get(members)
        if entry is None:
            raise MissingMarginal(f"no cached marginal for cluster {self.key(members)}")
        return entry.log_marginal

    def put(self, members, entry: CacheEntry, protect: Iterable[Key] = ()) -> None:
        k = self.key(members)
        self.entries[k] = entry
        self.entries.move_to_end(k)
        if self.max_entries is not None and len(self.entries) > self.max_entries:
            keep = set(protect) | {k}
            for old in list(self.entries):
                if len(self.entries) <= self.max_entries:
                    break
                if old not in keep:
                    del self.entries[old]

    def to_json(self) -> list:
        return [[list(k), e.log_marginal, e.theta_mode, e.newton_iters, e.fallback]
                for k, e in self.entries.items()]

    @classmethod
    def from_json(cls, rows, max_entries: int | None = None) -> "MarginalCache":
        cache = cls(max_entries)
        for k, lm, th, it, fb in rows:
            cache.entries[tuple(k)] = CacheEntry(float(lm), dict(th), int(it), bool(fb))
        return cache


class MarginalEvaluator:
    """Evaluates and caches cluster marginals for one panel and model."""

    def __init__(self, panel: Panel, spec: ModelSpec, config: LaplaceConfig = DEFAULT_CONFIG,
                 cache: MarginalCache | None = None, diagnostics: Callable[[dict], None] | None = None):
        self.panel = panel
        self.spec = spec
        self.config = config
        self.cache = cache if cache is not None else MarginalCache()
        self.diagnostics = diagnostics

    def compute(self, members: Sequence[int]) -> CacheEntry:
        res = integrate_hyperparameters(self.panel.cluster(members), self.spec, self.config)
        return CacheEntry(res.log_marginal, dict(res.theta_mode.values), res.newton_iters, res.fallback)

    def get(self, members: Sequence[int], protect: Iterable[Key] = ()) -> float:
        entry = self.cache.get(members)
        if entry is not None:
            self.cache.hits += 1
            return entry.log_marginal
        self.cache.misses += 1
        entry = self.compute(members)
        if entry.fallback:
            log.warning("cluster %s used the plug-in fallback", MarginalCache.key(members))
        if self.diagnostics is not None:
            self.diagnostics({"event": "marginal", "size": len(members),
                              "log_marginal": entry.log_marginal, "newton_iters": entry.newton_iters,
                              "fallback": entry.fallback})
        self.cache.put(members, entry, protect)
        return entry.log_marginal


@dataclass
class ChainState:
    partition: Partition
    cache: MarginalCache
    iter: int
    rng: np.random.Generator
    accepted: dict = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    proposed: dict = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})

    @property
    def tree(self) -> SpanningTree:
        return self.partition.tree

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def current_keys(self) -> list[Key]:
        return sorted(self.partition.members)

    def total_log_marginal(self) -> float:
        return float(sum(self.cache.value(k) for k in self.current_keys()))


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    move: str
    accepted: bool
    n_clusters: int
    log_marginal: float
    membership: tuple[int, ...]

    def to_line(self) -> str:
        return (f"{self.iter},{self.move},{int(self.accepted)},{self.n_clusters},"
                f"{self.log_marginal:.17g},{rle_encode(self.membership)}")

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        parts = line.rstrip("\n").split(",")
        if len(parts) != 6:
            raise TraceCorrupt(f"expected 6 fields, got {len(parts)}: {line!r}")
        try:
            return cls(int(parts[0]), parts[1], bool(int(parts[2])), int(parts[3]), float(parts[4]),
                       tuple(rle_decode(parts[5])))
        except ValueError as exc:
            raise TraceCorrupt(f"malformed trace line {line!r}") from exc


@dataclass
class ChainOutput:
    trace: list[TraceRecord]
    acceptance_rates: dict
    config: dict
    seed: int
    state: ChainState

    def memberships(self, burn_in_fraction: float = 0.0) -> list[np.ndarray]:
        start = int(math.floor(burn_in_fraction * len(self.trace)))
        return [np.array(r.membership) for r in self.trace[start:]]


# ---------------------------------------------------------------------------
# run-length encoding of membership vectors
# ---------------------------------------------------------------------------

def rle_encode(membership: Sequence[int]) -> str:
    """``[0, 0, 0, 1, 1]`` -> ``"0*3 1*2"``."""
    out = []
    prev, count = None, 0
    for m in membership:
        m = int(m)
        if m == prev:
            count += 1
            continue
        if prev is not None:
            out.append(f"{prev}*{count}")
        prev, count = m, 1
    if prev is not None:
        out.append(f"{prev}*{count}")
    return " ".join(out)


def rle_decode(text: str) -> list[int]:
    out: list[int] = []
    for tok in text.split():
        label, _, count = tok.partition("*")
        out.extend([int(label)] * int(count or 1))
    return out


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

def initial_partition(graph: SpatialGraph, c0: int, rng: np.random.Generator) -> Partition:
    """MST of U(0, 1) weights with the ``c0 - 1`` heaviest tree edges removed."""
    if c0 > graph.n_regions:
        raise ValueError(f"c0={c0} exceeds the number of regions {graph.n_regions}")
    w = rng.uniform(0.0, 1.0, size=graph.n_edges)
    tree = minimum_spanning_tree(graph, w)
    tree_w = np.array([w[graph.edge_index[e]] for e in tree.tree_edges])
    order = np.argsort(-tree_w, kind="stable")
    removed = [tree.tree_edges[k] for k in order[: c0 - 1]]
    return derive_partition(tree, removed)


def init_chain(graph: SpatialGraph, panel: Panel, spec: ModelSpec, config: RunConfig,
               rng: np.random.Generator | None = None,
               evaluator: MarginalEvaluator | None = None) -> ChainState:
    if panel.n_regions != graph.n_regions:
        raise ValueError("panel and graph disagree on the number of regions")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    partition = initial_partition(graph, config.c0, rng)
    if evaluator is None:
        evaluator = MarginalEvaluator(panel, spec, config.laplace, MarginalCache(config.cache_max_entries))
    keys = sorted(partition.members)
    for k in keys:
        evaluator.get(k, protect=keys)
    return ChainState(partition, evaluator.cache, 0, rng)


def acceptance_log_prob(state: ChainState, proposal: MoveProposal, fresh_marginals: dict) -> float:
    """``min(0, log accept ratio)`` using cached values for the old clusters."""
    if proposal.move_kind == "hyper":
        return 0.0
    old = 0.0
    for k in proposal.old_keys:
        old += state.cache.value(k)
    new = 0.0
    for k in proposal.new_keys:
        key = MarginalCache.key(k)
        if key not in fresh_marginals:
            raise MissingMarginal(f"no marginal supplied for new cluster {key}")
        new += fresh_marginals[key]
    log_ratio = new - old + proposal.log_prior_ratio + proposal.log_transition_ratio
    return min(0.0, log_ratio)


def recompute_total(partition: Partition, panel: Panel, spec: ModelSpec,
                    config: LaplaceConfig = DEFAULT_CONFIG) -> float:
    """From-scratch total log marginal of a partition, bypassing any cache."""
    ev = MarginalEvaluator(panel, spec, config)
    return float(sum(ev.compute(k).log_marginal for k in sorted(partition.members)))


def step(state: ChainState, evaluator: MarginalEvaluator, config: RunConfig) -> TraceRecord:
    rng = state.rng
    part = state.partition
    kind = select_move_kind(part, config.moves, rng)
    proposal = propose(kind, part, config.moves, rng)
    state.proposed[kind] += 1
    accepted = False
    if kind == "hyper":
        accepted = True
    else:
        protect = [MarginalCache.key(k) for k in part.members] + [MarginalCache.key(k) for k in proposal.new_keys]
        try:
            fresh = {MarginalCache.key(k): evaluator.get(k, protect=protect) for k in proposal.new_keys}
        except NoConvergence as exc:
            if not config.tolerate_nonconverged:
                raise
            log.warning("iteration %d: inner mode search failed (%s); proposal rejected", state.iter + 1, exc)
            if evaluator.diagnostics is not None:
                evaluator.diagnostics({"event": "nonconverged", "iter": state.iter + 1, "move": kind})
            fresh = None
        if fresh is not None:
            log_a = acceptance_log_prob(state, proposal, fresh)
            accepted = bool(log_a >= 0.0 or math.log(rng.uniform()) < log_a)
    if accepted:
        state.partition = proposal.new_partition
        state.accepted[kind] += 1
    state.iter += 1
    if config.debug_checks and state.iter % 50 == 0:
        check_partition(state.partition)
    p = state.partition
    return TraceRecord(state.iter, kind, accepted, p.n_clusters, state.total_log_marginal(),
                       tuple(int(m) for m in p.membership))


def acceptance_rates(state: ChainState) -> dict:
    return {k: (state.accepted[k] / state.proposed[k] if state.proposed[k] else float("nan"))
            for k in MOVE_KINDS}


def run_chain(graph: SpatialGraph, panel: Panel, spec: ModelSpec, config: RunConfig,
              rng: np.random.Generator | None = None, state: ChainState | None = None,
              n_iterations: int | None = None, trace_file=None,
              diagnostics: Callable[[dict], None] | None = None,
              callback: Callable[[ChainState, TraceRecord], None] | None = None) -> ChainOutput:
    """Run the sampler for ``n_iterations`` (default ``config.iterations``) steps.

    Pass ``state`` to continue an existing chain. Each trace record is also
    written to ``trace_file`` when one is given.
    """
    if state is None:
        evaluator = MarginalEvaluator(panel, spec, config.laplace, MarginalCache(config.cache_max_entries),
                                      diagnostics)
        state = init_chain(graph, panel, spec, config, rng, evaluator)
    else:
        evaluator = MarginalEvaluator(panel, spec, config.laplace, state.cache, diagnostics)
    n_iter = config.iterations - state.iter if n_iterations is None else n_iterations
    trace: list[TraceRecord] = []
    for _ in range(max(0, n_iter)):
        rec = step(state, evaluator, config)
        trace.append(rec)
        if trace_file is not None:
            trace_file.write(rec.to_line() + "\n")
        if callback is not None:
            callback(state, rec)
    return ChainOutput(trace, acceptance_rates(state), config.echo(), config.seed, state)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(state: ChainState, path: str | Path) -> None:
    p = state.partition
    payload = {
        "iter": state.iter,
        "rng_state": state.rng_state,
        "tree_edges": [list(e) for e in p.tree.tree_edges],
        "removed_edges": [list(e) for e in p.between_edges],
        "cache": state.cache.to_json(),
        "cache_max_entries": state.cache.max_entries,
        "accepted": state.accepted,
        "proposed": state.proposed,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path: str | Path, graph: SpatialGraph) -> ChainState:
    payload = json.loads(Path(path).read_text())
    tree = SpanningTree(graph, tuple(tuple(e) for e in payload["tree_edges"]))
    partition = derive_partition(tree, [tuple(e) for e in payload["removed_edges"]])
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = payload["rng_state"]
    cache = MarginalCache.from_json(payload["cache"], payload.get("cache_max_entries"))
    return ChainState(partition, cache, int(payload["iter"]), rng,
                      dict(payload["accepted"]), dict(payload["proposed"]))


# ---------------------------------------------------------------------------
# composition sampling
# ---------------------------------------------------------------------------

def composition_sample(membership: Sequence[int], panel: Panel, spec: ModelSpec, n_draws: int,
                       rng: np.random.Generator,
                       config: LaplaceConfig = DEFAULT_CONFIG) -> dict[int, LatentSummary]:
    """Latent-curve summaries for each cluster of a chosen partition.

    The hyperparameter integration is redone per cluster (the chain cache
    keeps only scalar marginals), then curves are drawn from the mixture of
    Gaussian approximations.
    """
    membership = np.asarray(membership)
    out: dict[int, LatentSummary] = {}
    for c in np.unique(membership):
        members = np.flatnonzero(membership == c)
        data = panel.cluster(members)
        res = integrate_hyperparameters(data, spec, config)
        out[int(c)] = conditional_posterior(data, spec, res, n_draws, rng)
    return out

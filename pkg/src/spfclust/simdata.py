"""Synthetic spatio-temporal panels on Voronoi region lattices.

Regions are Voronoi cells of uniform points in the unit square, adjacent when
their generators share a Delaunay edge. True partitions are either cut from a
random-weight spanning tree or grown into an imbalanced layout with a small
cluster enclosed by the largest one. Each cluster has a latent curve
``h_c(t)`` on ``t`` in [0, 1], centred so its mean over the grid is zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import Delaunay

from .graph import (
    Partition,
    SpatialGraph,
    build_graph,
    derive_partition,
    is_cluster_connected,
    minimum_spanning_tree,
    partition_from_membership,
)
from .lgm import bspline_basis, time_grid

log = logging.getLogger(__name__)

POLY_BETAS = ((1.0, 0.0), (-1.0, 0.0), (0.0, 0.0), (-3.0, 3.0), (3.0, -3.0))
POLY_TAUS = (0.01, 0.05, 0.02, 0.05, 0.02)
AR2_SMOOTH = (0.95, 0.0)
AR2_ROUGH = (0.5, 0.44)
N_SPLINES = 16
# stationary standard deviation of the spline coefficients
SPLINE_COEF_SD = 0.5

SIM2_TABLE = {
    "s1": (((1, 0.5), 0.10), ((0.90, 0.4), 0.10), ((1, 0.5), 0.15), ((-0.5, 1), 0.20), ((-1, 0.4), 0.05)),
    "s2": (((1, 0.5), 0.15), ((-1, 0.4), 0.10), ((1, 0.5), 0.12), ((1, 0.8), 0.20), ((-1, 0.4), 0.05)),
    "s3": (((1, 0.5), 0.15), ((-1, 0.4), 0.10), ((0.9, 0.5), 0.15), ((1, 0.8), 0.20), ((-1, 0.4), 0.05)),
}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    n_regions: int
    T: int
    true_C: int
    latent_kind: str            # "polynomial" or "bspline"
    family: str                 # "gaussian" or "poisson"
    betas: tuple = ()           # per-cluster (beta1, beta2); polynomial only
    taus: tuple = ()            # per-cluster noise standard deviations
    ar2: tuple = ()             # per-cluster AR2 coefficients; bspline only
    partition_kind: str = "mst"  # "mst" or "imbalanced"
    population_log_mean: tuple[float, float] = (10.0, 0.3)
    seed: int = 0

    def __post_init__(self):
        if self.latent_kind not in ("polynomial", "bspline"):
            raise ValueError(f"unknown latent kind {self.latent_kind!r}")
        if self.family not in ("gaussian", "poisson"):
            raise ValueError(f"unknown family {self.family!r}")
        if len(self.taus) != self.true_C:
            raise ValueError("taus must have one entry per cluster")
        if any(t < 0 for t in self.taus):
            raise ValueError("taus must be non-negative")
        if self.latent_kind == "polynomial" and len(self.betas) != self.true_C:
            raise ValueError("betas must have one entry per cluster")
        if self.latent_kind == "bspline" and len(self.ar2) != self.true_C:
            raise ValueError("ar2 must have one entry per cluster")
        if self.n_regions < 4 or self.true_C > self.n_regions:
            raise ValueError("need n_regions >= 4 and true_C <= n_regions")

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "n_regions": self.n_regions, "T": self.T, "true_C": self.true_C,
            "latent_kind": self.latent_kind, "family": self.family,
            "betas": [list(b) for b in self.betas], "taus": list(self.taus),
            "ar2": [list(a) for a in self.ar2], "partition_kind": self.partition_kind,
            "population_log_mean": list(self.population_log_mean), "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# lattice and partitions
# ---------------------------------------------------------------------------

def delaunay_graph(points: np.ndarray) -> SpatialGraph:
    """Adjacency graph of the Delaunay triangulation of ``points``."""
    tri = Delaunay(np.asarray(points, dtype=float))
    edges = set()
    for simplex in tri.simplices:
        a, b, c = (int(v) for v in simplex)
        for u, v in ((a, b), (b, c), (a, c)):
            edges.add((min(u, v), max(u, v)))
    return build_graph(len(points), sorted(edges))


def voronoi_lattice(n: int, seed: int) -> tuple[SpatialGraph, np.ndarray]:
    """``n`` uniform generators in the unit square and their Voronoi adjacency."""
    if n < 4:
        raise ValueError("need at least 4 regions")
    rng = np.random.default_rng(seed)
    for attempt in range(100):
        pts = rng.uniform(0.0, 1.0, size=(n, 2))
        try:
            return delaunay_graph(pts), pts
        except Exception as exc:  # degenerate draw; redraw
            log.info("lattice draw %d rejected: %s", attempt, exc)
    raise RuntimeError("could not draw a valid lattice")


def true_partition_from_mst(graph: SpatialGraph, C: int, seed: int) -> Partition:
    """Random-weight MST with ``C - 1`` uniformly chosen tree edges removed."""
    if not (1 <= C <= graph.n_regions):
        raise ValueError(f"C must lie in 1..{graph.n_regions}")
    rng = np.random.default_rng(seed)
    tree = minimum_spanning_tree(graph, rng.uniform(size=graph.n_edges))
    idx = rng.choice(len(tree.tree_edges), size=C - 1, replace=False)
    return derive_partition(tree, [tree.tree_edges[int(k)] for k in idx])


def imbalanced_sizes(n: int) -> tuple[int, int, int, int, int]:
    """Cluster sizes with shares of about 64/10/6/20 percent and a 2-region fifth cluster."""
    s5 = 2
    s3 = max(2, round(0.06 * n))
    s2 = max(2, round(0.10 * n))
    s4 = max(2, round(0.20 * n))
    s1 = n - s2 - s3 - s4 - s5
    if s1 < 3:
        raise ValueError(f"n={n} is too small for the imbalanced layout")
    return s1, s2, s3, s4, s5


def _grow(graph: SpatialGraph, seed_region: int, size: int, free: np.ndarray,
          rng: np.random.Generator) -> list[int] | None:
    grown = [seed_region]
    inside = {seed_region}
    while len(grown) < size:
        frontier = sorted({v for u in grown for v in graph.neighbors[u] if free[v] and v not in inside})
        if not frontier:
            return None
        v = frontier[int(rng.integers(len(frontier)))]
        grown.append(v)
        inside.add(v)
    return grown


def _connected(graph: SpatialGraph, members: np.ndarray) -> bool:
    return is_cluster_connected(graph, members.tolist())


def imbalanced_labels(graph: SpatialGraph, seed: int, max_attempts: int = 500) -> np.ndarray:
    """Grow a five-cluster layout by seeded region growing.

    Cluster 3 (label 2) has every neighbour in cluster 1 (label 0), and
    cluster 5 (label 4) touches cluster 2 (label 1). Labels follow the
    scenario's cluster order, not the canonical partition order.
    """
    n = graph.n_regions
    sizes = imbalanced_sizes(n)
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        labels = np.full(n, -1)
        free = np.ones(n, dtype=bool)
        c3 = _grow(graph, int(rng.integers(n)), sizes[2], free, rng)
        if c3 is None:
            continue
        labels[c3] = 2
        free[c3] = False
        ring = {v for u in c3 for v in graph.neighbors[u] if labels[v] != 2}
        reserved = free.copy()
        reserved[list(ring)] = False
        cand4 = np.flatnonzero(reserved)
        c4 = _grow(graph, int(cand4[rng.integers(cand4.size)]), sizes[3], reserved, rng)
        if c4 is None:
            continue
        labels[c4] = 3
        reserved[c4] = False
        cand2 = np.flatnonzero(reserved)
        c2 = _grow(graph, int(cand2[rng.integers(cand2.size)]), sizes[1], reserved, rng)
        if c2 is None:
            continue
        labels[c2] = 1
        reserved[c2] = False
        cand5 = sorted({v for u in c2 for v in graph.neighbors[u] if reserved[v]})
        if not cand5:
            continue
        c5 = _grow(graph, cand5[int(rng.integers(len(cand5)))], sizes[4], reserved, rng)
        if c5 is None:
            continue
        labels[c5] = 4
        labels[labels == -1] = 0
        if all(_connected(graph, np.flatnonzero(labels == c)) for c in range(5)):
            return labels
    raise RuntimeError("could not grow an imbalanced partition on this graph")


# ---------------------------------------------------------------------------
# latent curves and panels
# ---------------------------------------------------------------------------

def ar2_series(phi: tuple[float, float], length: int, rng: np.random.Generator,
               burn_in: int = 200, sd: float = SPLINE_COEF_SD) -> np.ndarray:
    """Stationary AR2 draw scaled to marginal standard deviation ``sd``."""
    p1, p2 = phi
    x = np.zeros(length + burn_in)
    z = rng.standard_normal(length + burn_in)
    for t in range(2, length + burn_in):
        x[t] = p1 * x[t - 1] + p2 * x[t - 2] + z[t]
    # stationary variance of an AR2 with unit innovations
    var = (1 - p2) / ((1 + p2) * ((1 - p2) ** 2 - p1 ** 2))
    return x[burn_in:] * sd / np.sqrt(var)


def latent_curves(spec: ScenarioSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-cluster curves ``h_c(t)`` as a ``true_C x T`` array, each with grid mean zero."""
    t = time_grid(spec.T)
    if spec.latent_kind == "polynomial":
        raw = np.array([b1 * t + b2 * t ** 2 for b1, b2 in spec.betas])
    else:
        rng = np.random.default_rng(spec.seed) if rng is None else rng
        B = bspline_basis(spec.T, N_SPLINES)
        raw = np.array([B @ ar2_series(tuple(phi), N_SPLINES, rng) for phi in spec.ar2])
    return raw - raw.mean(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    y: np.ndarray
    population: np.ndarray | None
    h: np.ndarray
    eps: np.ndarray | None

    @property
    def offset(self) -> np.ndarray:
        if self.population is None:
            return np.zeros_like(self.y)
        return np.broadcast_to(np.log(self.population)[:, None], self.y.shape).copy()


def simulate_panel(spec: ScenarioSpec, labels: np.ndarray, curves: np.ndarray,
                   rng: np.random.Generator) -> SimulatedPanel:
    """Draw observations given scenario labels (0-based cluster order) and curves."""
    labels = np.asarray(labels)
    if labels.shape != (spec.n_regions,):
        raise ValueError("labels must have one entry per region")
    if curves.shape != (spec.true_C, spec.T):
        raise ValueError(f"curves must be {spec.true_C} x {spec.T}")
    tau = np.asarray(spec.taus, dtype=float)[labels][:, None]
    h = curves[labels]
    noise = rng.standard_normal(h.shape)
    if spec.family == "gaussian":
        return SimulatedPanel(h + tau * noise, None, h, None)
    mu, sd = spec.population_log_mean
    lam = np.exp(rng.normal(mu, sd, size=spec.n_regions))
    pop = np.maximum(rng.poisson(lam), 1).astype(float)
    eps = tau * noise
    y = rng.poisson(pop[:, None] * np.exp(h + eps)).astype(float)
    return SimulatedPanel(y, pop, h, eps)


def log_rate_transform(y: np.ndarray, population: np.ndarray) -> np.ndarray:
    """``log(max(y, 0.5) / N)``, the log-Gaussian view of count data."""
    population = np.asarray(population, dtype=float)
    if population.ndim == 1:
        population = population[:, None]
    return np.log(np.maximum(y, 0.5) / population)


@dataclass(frozen=True, eq=False)
class Simulation:
    spec: ScenarioSpec
    graph: SpatialGraph
    centroids: np.ndarray
    partition: Partition
    labels: np.ndarray          # scenario cluster order
    curves: np.ndarray
    panel: SimulatedPanel


def generate(spec: ScenarioSpec) -> Simulation:
    """Lattice, true partition, curves and panel from one seed."""
    s_lat, s_part, s_curve, s_panel = np.random.SeedSequence(spec.seed).spawn(4)
    graph, pts = voronoi_lattice(spec.n_regions, int(s_lat.generate_state(1)[0]))
    part_seed = int(s_part.generate_state(1)[0])
    if spec.partition_kind == "imbalanced":
        if spec.true_C != 5:
            raise ValueError("the imbalanced layout has exactly 5 clusters")
        labels = imbalanced_labels(graph, part_seed)
        partition = partition_from_membership(graph, labels, np.random.default_rng(part_seed))
    else:
        partition = true_partition_from_mst(graph, spec.true_C, part_seed)
        labels = np.asarray(partition.membership).copy()
    curves = latent_curves(spec, np.random.default_rng(s_curve))
    panel = simulate_panel(spec, labels, curves, np.random.default_rng(s_panel))
    return Simulation(spec, graph, pts, partition, labels, curves, panel)


# ---------------------------------------------------------------------------
# built-in scenarios
# ---------------------------------------------------------------------------

def _sim1(kind: str, family: str, n: int, T: int, C: int, suffix: str = "") -> ScenarioSpec:
    reps = (C + 4) // 5
    name = f"sim1-{'poly' if kind == 'polynomial' else 'bspline'}-{family}{suffix}"
    return ScenarioSpec(
        name=name, n_regions=n, T=T, true_C=C, latent_kind=kind, family=family,
        betas=(POLY_BETAS * reps)[:C] if kind == "polynomial" else (),
        taus=(POLY_TAUS * reps)[:C],
        ar2=tuple(AR2_SMOOTH if c < 5 else AR2_ROUGH for c in range(C)) if kind == "bspline" else (),
    )


def _sim2(scenario: str, n: int, T: int, suffix: str = "") -> ScenarioSpec:
    rows = SIM2_TABLE[scenario]
    return ScenarioSpec(
        name=f"sim2-{scenario}{suffix}", n_regions=n, T=T, true_C=5, latent_kind="polynomial",
        family="poisson", betas=tuple(tuple(float(v) for v in b) for b, _ in rows),
        taus=tuple(t for _, t in rows), partition_kind="imbalanced",
    )


def builtin_scenarios() -> dict[str, ScenarioSpec]:
    out: dict[str, ScenarioSpec] = {}
    for kind in ("polynomial", "bspline"):
        for family in ("gaussian", "poisson"):
            for spec in (_sim1(kind, family, 100, 100, 10), _sim1(kind, family, 30, 40, 4, "-desk")):
                out[spec.name] = spec
    for s in ("s1", "s2", "s3"):
        # the desk analogue keeps T = 100: at T = 40 the small clusters carry too little evidence
        for spec in (_sim2(s, 100, 100), _sim2(s, 30, 100, "-desk")):
            out[spec.name] = spec
    return out

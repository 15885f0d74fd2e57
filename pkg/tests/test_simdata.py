from __future__ import annotations

import numpy as np
import pytest

from spfclust.graph import check_partition, is_cluster_connected
from spfclust.simdata import (
    POLY_TAUS,
    SIM2_TABLE,
    ScenarioSpec,
    ar2_series,
    builtin_scenarios,
    delaunay_graph,
    generate,
    imbalanced_labels,
    imbalanced_sizes,
    latent_curves,
    log_rate_transform,
    simulate_panel,
    true_partition_from_mst,
    voronoi_lattice,
)


def tiny_spec(**kw):
    base = dict(name="t", n_regions=6, T=5, true_C=2, latent_kind="polynomial", family="gaussian",
                betas=((1.0, 0.0), (0.0, 0.0)), taus=(0.1, 0.1))
    base.update(kw)
    return ScenarioSpec(**base)


# -- lattice --------------------------------------------------------------------

def test_square_corners():
    g = delaunay_graph(np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float))
    assert g.n_edges == 5
    cycle = {(0, 1), (0, 2), (1, 3), (2, 3)}
    assert cycle < set(g.edges)


def test_lattice_is_deterministic():
    g1, p1 = voronoi_lattice(100, seed=5)
    g2, p2 = voronoi_lattice(100, seed=5)
    assert g1.n_regions == 100
    assert g1.edges == g2.edges and np.array_equal(p1, p2)
    g3, _ = voronoi_lattice(100, seed=6)
    assert g3.edges != g1.edges


def test_lattice_is_planar_sized():
    g, _ = voronoi_lattice(60, seed=1)
    # a planar triangulation has at most 3n - 6 edges
    assert 60 - 1 <= g.n_edges <= 3 * 60 - 6


@pytest.mark.parametrize("C", [1, 4, 10])
def test_mst_partition(C):
    g, _ = voronoi_lattice(100, seed=2)
    p = true_partition_from_mst(g, C, seed=3)
    assert p.n_clusters == C
    check_partition(p)


# -- imbalanced layout ----------------------------------------------------------

def test_imbalanced_sizes():
    assert imbalanced_sizes(100) == (62, 10, 6, 20, 2)
    assert imbalanced_sizes(30) == (17, 3, 2, 6, 2)
    with pytest.raises(ValueError):
        imbalanced_sizes(8)


@pytest.mark.parametrize("seed", range(5))
def test_imbalanced_topology(seed):
    g, _ = voronoi_lattice(30, seed=seed)
    labels = imbalanced_labels(g, seed)
    assert tuple(np.bincount(labels)) == imbalanced_sizes(30)
    for c in range(5):
        assert is_cluster_connected(g, np.flatnonzero(labels == c).tolist())
    # cluster 3 is enclosed by cluster 1
    for u in np.flatnonzero(labels == 2):
        assert all(labels[v] in (0, 2) for v in g.neighbors[u])
    # cluster 5 touches cluster 2
    assert any(labels[v] == 1 for u in np.flatnonzero(labels == 4) for v in g.neighbors[u])


# -- curves ---------------------------------------------------------------------

def test_zero_beta_gives_zero_curve():
    curves = latent_curves(tiny_spec(betas=((0.0, 0.0), (0.0, 0.0))))
    assert np.all(curves == 0.0)


def test_linear_curve_is_centred():
    curves = latent_curves(tiny_spec(T=11))
    assert curves[0].mean() == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(np.diff(curves[0], 2), 0.0)
    assert np.allclose(np.diff(curves[0]), 0.1)


def test_ar2_lag_one_autocorrelation():
    rng = np.random.default_rng(0)
    draws = np.array([ar2_series((0.95, 0.0), 2, rng) for _ in range(10_000)])
    r = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    assert r == pytest.approx(0.95, abs=0.01)
    assert draws.std() == pytest.approx(0.5, rel=0.03)


def test_bspline_curves():
    spec = builtin_scenarios()["sim1-bspline-gaussian"]
    curves = latent_curves(spec, np.random.default_rng(1))
    assert curves.shape == (10, 100)
    assert np.allclose(curves.mean(axis=1), 0.0)
    # the rough AR2 clusters wiggle more than the smooth ones
    rough = np.abs(np.diff(curves[5:], 2)).mean()
    smooth = np.abs(np.diff(curves[:5], 2)).mean()
    assert rough > smooth


# -- panels ---------------------------------------------------------------------

def test_zero_noise_gaussian_is_exact():
    spec = tiny_spec(taus=(0.0, 0.0))
    curves = latent_curves(spec)
    labels = np.array([0, 0, 0, 1, 1, 1])
    sim = simulate_panel(spec, labels, curves, np.random.default_rng(0))
    assert np.array_equal(sim.y, curves[labels])


def test_poisson_rate_law_of_large_numbers():
    spec = tiny_spec(n_regions=100, T=100, family="poisson", betas=((0.0, 0.0), (0.0, 0.0)), taus=(0.0, 0.0))
    curves = np.zeros((2, 100))
    sim = simulate_panel(spec, np.zeros(100, dtype=int), curves, np.random.default_rng(0))
    ratio = sim.y / sim.population[:, None]
    assert ratio.size == 10_000
    assert ratio.mean() == pytest.approx(1.0, abs=1e-3)
    assert np.all(sim.population >= 1)


def test_gaussian_noise_sd_matches_tau():
    spec = tiny_spec(n_regions=4, T=3, taus=(0.2, 0.05))
    curves = latent_curves(spec)
    labels = np.array([0, 0, 1, 1])
    rng = np.random.default_rng(1)
    reps = np.stack([simulate_panel(spec, labels, curves, rng).y for _ in range(10_000)])
    sd = reps.std(axis=0)
    assert np.allclose(sd[:2], 0.2, rtol=0.05)
    assert np.allclose(sd[2:], 0.05, rtol=0.05)


def test_log_rate_transform():
    y = np.array([[0.0, 10.0]])
    out = log_rate_transform(y, np.array([100.0]))
    assert np.allclose(out, np.log([[0.005, 0.1]]))


def test_generate_is_bit_reproducible():
    spec = builtin_scenarios()["sim1-poly-poisson-desk"]
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.panel.y, b.panel.y)
    assert np.array_equal(a.labels, b.labels)
    assert a.graph.edges == b.graph.edges
    c = generate(spec.with_seed(1))
    assert not np.array_equal(a.panel.y, c.panel.y)
    check_partition(a.partition)
    assert np.array_equal(a.partition.membership, a.labels)


def test_generate_imbalanced():
    sim = generate(builtin_scenarios()["sim2-s1-desk"])
    assert tuple(np.bincount(sim.labels)) == imbalanced_sizes(30)
    check_partition(sim.partition)
    assert sim.panel.y.shape == (30, 100)


# -- built-in table -------------------------------------------------------------

def test_sim2_table_values():
    s = builtin_scenarios()
    s1, s2 = s["sim2-s1"], s["sim2-s2"]
    assert s1.betas[2] == (1.0, 0.5) and s1.taus[2] == 0.15
    assert s2.betas[4] == (-1.0, 0.4) and s2.taus[4] == 0.05
    assert s["sim2-s3"].betas[2] == (0.9, 0.5)
    assert len(SIM2_TABLE) == 3


def test_sim1_taus_repeat():
    spec = builtin_scenarios()["sim1-poly-gaussian"]
    assert spec.taus == POLY_TAUS * 2
    assert spec.true_C == 10 and spec.n_regions == 100
    desk = builtin_scenarios()["sim1-poly-gaussian-desk"]
    assert (desk.n_regions, desk.T, desk.true_C) == (30, 40, 4)


def test_scenario_validation():
    with pytest.raises(ValueError):
        tiny_spec(taus=(0.1,))
    with pytest.raises(ValueError):
        tiny_spec(latent_kind="fourier")
    with pytest.raises(ValueError):
        tiny_spec(taus=(-1.0, 0.1))

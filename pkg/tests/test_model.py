import math

import networkx as nx
import numpy as np
import pytest
from scipy.stats import chisquare, poisson

from app.errors import GuardViolation, NumericalPreconditionError
from app.model import (BoxGeometry, ConnectionFunction, RngSpec, ball_volume, candidate_pairs, cluster_of,
                       eval_phi, mass_phi, sample_displacement, sample_rcm)


def origin(d=1):
    return np.zeros((1, d))


def test_gilbert_phi_closed_ball():
    f = ConnectionFunction.gilbert(1.0)
    assert eval_phi(f, 0.0) == 1.0
    assert eval_phi(f, 1.0) == 1.0
    assert eval_phi(f, -1.0) == 1.0
    assert eval_phi(f, 1.0000001) == 0.0
    assert eval_phi(f, 2.5) == 0.0


def test_phi_on_vectors():
    f = ConnectionFunction.gilbert(1.0, dimension=2)
    assert eval_phi(f, np.array([0.6, 0.8])) == 1.0
    assert eval_phi(f, np.array([0.8, 0.8])) == 0.0
    values = eval_phi(f, np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert values.tolist() == [1.0, 0.0]


def test_phi_rejects_nonfinite():
    with pytest.raises(ValueError):
        eval_phi(ConnectionFunction.gilbert(1.0), np.nan)


def test_exponential_phi_and_mass():
    f = ConnectionFunction.exponential(2.0)
    assert eval_phi(f, 0.5) == pytest.approx(math.exp(-1.0))
    assert mass_phi(f) == pytest.approx(1.0)


def test_gilbert_mass_is_ball_volume():
    assert mass_phi(ConnectionFunction.gilbert(1.0)) == pytest.approx(2.0)
    assert mass_phi(ConnectionFunction.gilbert(1.0, dimension=2)) == pytest.approx(math.pi)
    assert ball_volume(3, 2.0) == pytest.approx(4 / 3 * math.pi * 8)


def test_radial_table_mass_by_quadrature():
    # triangle 1 - r on [0, 1] in d = 1 integrates to 1
    f = ConnectionFunction.radial_table([(0.0, 1.0), (1.0, 0.0)])
    assert mass_phi(f) == pytest.approx(1.0, rel=1e-9)
    assert eval_phi(f, 0.25) == pytest.approx(0.75)
    assert eval_phi(f, 3.0) == 0.0


def test_exponential_mass_in_two_dimensions():
    f = ConnectionFunction.exponential(1.0, dimension=2)
    assert mass_phi(f) == pytest.approx(2 * math.pi, rel=1e-8)


@pytest.mark.parametrize("pairs", [
    [(0.0, 1.0)],
    [(0.0, 1.0), (0.0, 0.5)],
    [(0.0, 1.5), (1.0, 0.0)],
    [(0.0, 0.0), (1.0, 0.0)],
])
def test_radial_table_validation(pairs):
    with pytest.raises(ValueError):
        ConnectionFunction.radial_table(pairs)


def test_sample_displacement_follows_phi():
    f = ConnectionFunction.exponential(1.0)
    x = sample_displacement(f, 20000, np.random.default_rng(3))
    assert x.shape == (20000, 1)
    # |X| ~ Exp(1)
    assert np.mean(np.abs(x)) == pytest.approx(1.0, abs=0.05)
    assert abs(np.mean(x)) < 0.05

    g = ConnectionFunction.gilbert(2.0, dimension=2)
    y = sample_displacement(g, 5000, np.random.default_rng(4))
    assert np.all(np.linalg.norm(y, axis=1) <= 2.0)


def test_box_guard():
    f = ConnectionFunction.gilbert(1.0)
    with pytest.raises(GuardViolation):
        BoxGeometry(side_length=2.0).check_connection(f)
    with pytest.raises(GuardViolation):
        BoxGeometry(side_length=10.0, dimension=2).check_connection(f)
    BoxGeometry(side_length=2.5).check_connection(f)


def test_minimal_image_displacement():
    box = BoxGeometry(side_length=10.0)
    assert box.displacement(np.array([4.5]), np.array([-4.5]))[0] == pytest.approx(1.0)
    free = BoxGeometry(side_length=10.0, boundary="free")
    assert free.displacement(np.array([4.5]), np.array([-4.5]))[0] == pytest.approx(-9.0)


def test_rng_spec_children_are_distinct_and_stable():
    rng = RngSpec(seed=7)
    assert rng.child(1) == rng.child(1)
    assert rng.child(1) != rng.child(2)
    assert rng.child(1, 0) != rng.child(0, 1)
    a = rng.generator().random(4)
    b = rng.generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng.with_stream(1).generator().random(4))


def test_pair_uniforms_are_symmetric():
    rng = RngSpec(seed=11, stream=3)
    i = np.array([0, 5, 9])
    j = np.array([4, 2, 1])
    u = rng.pair_uniforms(i, j)
    assert np.array_equal(u, rng.pair_uniforms(j, i))
    assert np.all((u >= 0) & (u < 1))
    assert len(set(u.tolist())) == 3


def test_sample_is_deterministic():
    f = ConnectionFunction.gilbert(1.0)
    box = BoxGeometry(side_length=30.0)
    rng = RngSpec(seed=5, stream=2)
    a = sample_rcm(1.0, f, box, origin(), rng)
    b = sample_rcm(1.0, f, box, origin(), rng)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.edges, b.edges)
    c = sample_rcm(1.0, f, box, origin(), rng.with_stream(3))
    assert not np.array_equal(a.points, c.points)


def test_zero_intensity_sample_holds_only_pins():
    f = ConnectionFunction.gilbert(1.0)
    box = BoxGeometry(side_length=10.0)
    sample = sample_rcm(0.0, f, box, np.array([[0.0], [0.5], [3.0]]), RngSpec(seed=1))
    assert sample.size == 3
    assert sample.pinned_count == 3
    assert sample.connected(0, 1)
    assert not sample.connected(0, 2)
    assert sample.cluster_size_of(2) == 1


def test_negative_intensity_rejected():
    with pytest.raises(NumericalPreconditionError):
        sample_rcm(-0.1, ConnectionFunction.gilbert(1.0), BoxGeometry(side_length=10.0), origin(), RngSpec(seed=1))


def test_pin_outside_box_rejected():
    with pytest.raises(GuardViolation):
        sample_rcm(0.1, ConnectionFunction.gilbert(1.0), BoxGeometry(side_length=10.0), np.array([[6.0]]),
                   RngSpec(seed=1))


@pytest.mark.parametrize("d,boundary", [(1, "periodic"), (2, "periodic"), (2, "free"), (3, "periodic")])
def test_cell_list_matches_brute_force(d, boundary):
    box = BoxGeometry(side_length=8.0, dimension=d, boundary=boundary)
    points = np.random.default_rng(d).uniform(-4.0, 4.0, size=(300, d))
    cells = candidate_pairs(points, box, 1.3, "cells")
    brute = candidate_pairs(points, box, 1.3, "brute")
    assert set(zip(cells[0].tolist(), cells[1].tolist())) == set(zip(brute[0].tolist(), brute[1].tolist()))


def test_cell_list_with_tiny_cutoff():
    box = BoxGeometry(side_length=100.0)
    points = np.array([[0.0], [1e-4], [10.0]])
    i, j, _ = candidate_pairs(points, box, 1e-3)
    assert list(zip(i.tolist(), j.tolist())) == [(0, 1)]


def test_edge_set_does_not_depend_on_pair_search():
    f = ConnectionFunction.exponential(1.0, dimension=2)
    box = BoxGeometry(side_length=80.0, dimension=2)
    rng = RngSpec(seed=9)
    cells = sample_rcm(0.05, f, box, origin(2), rng)
    brute = sample_rcm(0.05, f, box, origin(2), rng, pair_method="brute")
    assert np.array_equal(cells.edges, brute.edges)


def test_clusters_partition_the_sample():
    f = ConnectionFunction.gilbert(1.0, dimension=2)
    box = BoxGeometry(side_length=15.0, dimension=2)
    sample = sample_rcm(0.8, f, box, origin(2), RngSpec(seed=21))

    graph = nx.Graph()
    graph.add_nodes_from(range(sample.size))
    graph.add_edges_from(sample.edges.tolist())
    expected = sorted(sorted(c) for c in nx.connected_components(graph))
    clusters = {cluster_of(sample, v) for v in range(sample.size)}
    assert sorted(sorted(c) for c in clusters) == expected
    assert sum(len(c) for c in clusters) == sample.size
    assert sample.cluster_count == len(expected)


def test_cluster_of_rejects_bad_index():
    sample = sample_rcm(0.0, ConnectionFunction.gilbert(1.0), BoxGeometry(side_length=10.0), origin(),
                        RngSpec(seed=1))
    with pytest.raises(IndexError):
        cluster_of(sample, 1)


def test_touches_boundary():
    f = ConnectionFunction.gilbert(1.0)
    box = BoxGeometry(side_length=10.0)
    sample = sample_rcm(0.0, f, box, np.array([[0.0], [0.9], [1.8], [2.7], [3.6], [4.5]]), RngSpec(seed=1))
    assert sample.cluster_size_of(0) == 6
    assert sample.touches_boundary(0, margin=1.0)
    short = sample_rcm(0.0, f, box, np.array([[0.0], [0.9]]), RngSpec(seed=1))
    assert not short.touches_boundary(0, margin=1.0)


@pytest.mark.slow
def test_pin_degree_is_poisson():
    # the pin at the origin sees Poisson(t * m_phi) neighbours
    t, f = 0.5, ConnectionFunction.gilbert(1.0)
    box = BoxGeometry(side_length=20.0)
    rng = RngSpec(seed=2024)
    degrees = np.array([sample_rcm(t, f, box, origin(), rng.with_stream(r)).degree(0) for r in range(4000)])
    top = 5
    observed = np.array([np.sum(degrees == k) for k in range(top)] + [np.sum(degrees >= top)])
    pmf = poisson.pmf(np.arange(top), t * mass_phi(f))
    expected = np.append(pmf, 1.0 - pmf.sum()) * len(degrees)
    assert chisquare(observed, expected).pvalue > 1e-3


@pytest.mark.parametrize("t,side,d", [(0.5, 20.0, 1), (0.2, 10.0, 2)])
def test_background_count_has_poisson_mean(t, side, d):
    box = BoxGeometry(side_length=side, dimension=d)
    f = ConnectionFunction.gilbert(1.0, dimension=d)
    rng = RngSpec(seed=77)
    replicates = 2000
    counts = [sample_rcm(t, f, box, origin(d), rng.with_stream(r)).size - 1 for r in range(replicates)]
    expected = t * box.volume
    assert abs(np.mean(counts) - expected) <= 4 * math.sqrt(expected / replicates)

import math

import numpy as np
import pytest

from app.errors import NumericalPreconditionError, SubcriticalGuardError
from app.estimators import (RadialProfile, batch_means, binomial_stderr, cluster_size_exact_small,
                            estimate_cluster_density, estimate_cluster_size_dist, estimate_mean_cluster_size,
                            estimate_pairconn, estimate_pairconn_by_size, estimate_pairconn_profile,
                            format_point, integrate_profile, pair_cluster_size_exact_small, parse_point,
                            profile_edges, profile_from_table, run_replicates)
from app.model import BoxGeometry, ConnectionFunction, RngSpec

GILBERT = ConnectionFunction.gilbert(1.0)
BOX = BoxGeometry(side_length=20.0)
RNG = RngSpec(seed=1234)


def test_zero_intensity_pair_connectedness_is_phi():
    table = estimate_pairconn(0.0, GILBERT, BOX, [0.5, 1.0, 1.5], 50, RNG)
    assert table.estimates().tolist() == [1.0, 1.0, 0.0]
    assert table.errors().tolist() == [0.0, 0.0, 0.0]
    assert [row.input for row in table.rows] == ["0.5", "1", "1.5"]
    assert table.metadata["replicates"] == 50


def test_probe_outside_box():
    with pytest.raises(NumericalPreconditionError):
        estimate_pairconn(0.1, GILBERT, BOX, [15.0], 10, RNG)


def test_pairconn_is_deterministic_across_threads():
    serial = estimate_pairconn(0.3, GILBERT, BOX, [1.5], 300, RNG, workers=1)
    threaded = estimate_pairconn(0.3, GILBERT, BOX, [1.5], 300, RNG, workers=4)
    assert serial.rows == threaded.rows


def test_run_replicates_keeps_order():
    rows = run_replicates(10, lambda r: (r, r * r), workers=3, chunk_size=3)
    assert rows.shape == (10, 2)
    assert rows[:, 0].tolist() == list(range(10))
    assert run_replicates(0, lambda r: (r,)).shape == (0, 1)


def test_binomial_stderr():
    assert binomial_stderr(0.5, 100) == pytest.approx(0.05)
    assert binomial_stderr(0.0, 100) == 0.0
    assert binomial_stderr(0.3, 0) == 0.0


def test_batch_means():
    mean, stderr = batch_means(np.full(640, 3.0))
    assert mean == 3.0
    assert stderr == 0.0
    samples = np.random.default_rng(0).normal(1.0, 2.0, size=64000)
    mean, stderr = batch_means(samples)
    assert stderr == pytest.approx(2.0 / math.sqrt(64000), rel=0.4)
    assert batch_means(np.array([1.0, 3.0]))[1] == pytest.approx(1.0)


def test_point_text():
    assert format_point(0.5) == "0.5"
    assert format_point([1.0, -2.5]) == "1 -2.5"
    assert parse_point("1 -2.5", 2).tolist() == [1.0, -2.5]
    with pytest.raises(ValueError):
        parse_point("1", 2)


def test_profile_bins_are_closed_on_the_right():
    edges = profile_edges(0.1, 1.0)
    assert len(edges) == 11
    profile = RadialProfile(edges=edges, values=np.arange(10.0), counts=np.ones(10), errors=np.zeros(10))
    assert profile.radial(0.0) == 0.0
    assert profile.radial(edges[1]) == 0.0
    assert profile.radial(0.15) == 1.0
    assert profile.radial(-0.15) == 1.0
    assert profile.radial(1.0) == 9.0
    assert profile.radial(1.01) == 0.0
    assert profile.support_radius == pytest.approx(1.0)


def test_profile_validation():
    with pytest.raises(ValueError):
        RadialProfile(edges=np.array([0.1, 0.2]), values=np.ones(1), counts=np.ones(1), errors=np.zeros(1))
    with pytest.raises(ValueError):
        RadialProfile(edges=np.array([0.0, 0.1, 0.2]), values=np.ones(1), counts=np.ones(1),
                      errors=np.zeros(1))


def test_integrate_profile_uses_shell_volumes():
    edges = profile_edges(0.25, 2.0)
    values = np.where(edges[1:] <= 1.0, 1.0, 0.0)
    profile = RadialProfile(edges=edges, values=values, counts=np.ones(8), errors=np.full(8, 0.1))
    assert integrate_profile(profile, 1)[0] == pytest.approx(2.0)
    assert integrate_profile(profile, 2)[0] == pytest.approx(math.pi)
    assert integrate_profile(profile, 1)[1] == pytest.approx(0.1 * 0.5 * math.sqrt(8))


def test_zero_intensity_profile_integrates_to_mass():
    profile, table = estimate_pairconn_profile(0.0, GILBERT, BOX, 0.25, 2.0, 20, RNG)
    assert profile.values.tolist() == [1.0] * 4 + [0.0] * 4
    assert integrate_profile(profile, 1)[0] == pytest.approx(2.0)
    assert table.metadata["bin_width"] == 0.25
    rebuilt = profile_from_table(table, 1)
    assert np.allclose(rebuilt.edges, profile.edges)
    assert rebuilt.values.tolist() == profile.values.tolist()


def test_cluster_size_distribution_at_zero_intensity():
    table = estimate_cluster_size_dist(0.0, GILBERT, BOX, 3, 25, RNG)
    assert [row.input for row in table.rows] == ["1", "2", "3", "overflow"]
    assert table.estimates().tolist() == [1.0, 0.0, 0.0, 0.0]
    assert table.kind == "cluster-size"


def test_cluster_size_distribution_sums_to_one():
    table = estimate_cluster_size_dist(0.2, GILBERT, BOX, 4, 500, RNG)
    assert table.estimates().sum() == pytest.approx(1.0)
    assert all(row.n == 500 for row in table.rows)


def test_isolated_origin_matches_poisson_void():
    t = 0.2
    table = estimate_cluster_size_dist(t, GILBERT, BOX, 2, 4000, RNG)
    row = table.row("1")
    assert row.estimate == pytest.approx(math.exp(-t * 2.0), abs=4 * row.stderr)


def test_pair_connectedness_by_size_at_zero_intensity():
    table = estimate_pairconn_by_size(0.0, GILBERT, BOX, 0.5, 3, 20, RNG)
    assert [row.input for row in table.rows] == ["2", "3", "overflow"]
    assert table.row("2").estimate == 1.0
    far = estimate_pairconn_by_size(0.0, GILBERT, BOX, 3.0, 3, 20, RNG)
    assert far.estimates().sum() == 0.0


def test_mean_cluster_size_at_zero_intensity():
    estimate = estimate_mean_cluster_size(0.0, GILBERT, BOX, 50, RNG)
    assert estimate.value == 1.0
    assert estimate.stderr == 0.0
    assert estimate.inverse_mean == 1.0
    assert not estimate.boundary_flag
    assert estimate.to_dict()["mean_cluster_size"] == 1.0


def test_subcritical_guard():
    with pytest.raises(SubcriticalGuardError):
        estimate_mean_cluster_size(0.6, GILBERT, BOX, 10, RNG)
    estimate = estimate_mean_cluster_size(0.6, GILBERT, BOX, 10, RNG, subcritical_bound=1.0)
    assert estimate.value >= 1.0


def test_boundary_flag_in_small_box():
    small = BoxGeometry(side_length=3.0)
    estimate = estimate_mean_cluster_size(0.4, GILBERT, small, 200, RNG)
    assert estimate.boundary_fraction > 0.2
    assert estimate.boundary_flag


def test_cluster_density_of_tiny_radius_is_intensity():
    tiny = ConnectionFunction.gilbert(1e-3)
    t = 0.5
    estimate = estimate_cluster_density(t, tiny, BOX, 400, RNG)
    assert estimate.density == pytest.approx(t, abs=4 * estimate.stderr + 1e-3)
    assert estimate.palm_density == pytest.approx(t, abs=1e-2)


def test_cluster_density_at_zero_intensity():
    estimate = estimate_cluster_density(0.0, GILBERT, BOX, 10, RNG)
    assert estimate.density == 0.0
    assert estimate.palm_density == 0.0


def test_exact_isolated_and_pair_probabilities():
    t = 0.3
    assert cluster_size_exact_small(t, GILBERT, 0) == pytest.approx(math.exp(-2 * t))
    # 2 e^{-2t} (1 - e^{-t}) for the unit Gilbert graph on the line
    assert cluster_size_exact_small(t, GILBERT, 1) == pytest.approx(2 * math.exp(-2 * t) * (1 - math.exp(-t)),
                                                                     rel=1e-8)
    assert cluster_size_exact_small(0.0, GILBERT, 1) == 0.0


def test_exact_probabilities_are_a_partial_pmf():
    t = 0.3
    values = [cluster_size_exact_small(t, GILBERT, n) for n in range(3)]
    assert all(0 < v < 1 for v in values)
    assert sum(values) < 1
    smooth = ConnectionFunction.exponential(2.0)
    assert 0 < cluster_size_exact_small(t, smooth, 1) < 1 - cluster_size_exact_small(t, smooth, 0)


def test_exact_pinned_pair():
    t = 0.3
    assert pair_cluster_size_exact_small(t, GILBERT, 0.5, 0) == pytest.approx(math.exp(-2.5 * t))
    assert pair_cluster_size_exact_small(t, GILBERT, 1.5, 0) == 0.0
    assert pair_cluster_size_exact_small(t, GILBERT, 1.5, 1) > 0
    assert pair_cluster_size_exact_small(0.0, GILBERT, 1.5, 1) == 0.0


def test_exact_formulas_reject_bad_input():
    with pytest.raises(ValueError):
        cluster_size_exact_small(0.1, GILBERT, 3)
    with pytest.raises(ValueError):
        pair_cluster_size_exact_small(0.1, GILBERT, 0.5, 2)
    with pytest.raises(NumericalPreconditionError):
        cluster_size_exact_small(0.1, ConnectionFunction.gilbert(1.0, dimension=2), 1)


@pytest.mark.slow
def test_two_point_cluster_against_simulation():
    t = 0.2
    table = estimate_cluster_size_dist(t, GILBERT, BOX, 3, 20000, RNG)
    for n in range(3):
        row = table.row(str(n + 1))
        assert row.estimate == pytest.approx(cluster_size_exact_small(t, GILBERT, n), abs=4 * row.stderr)


@pytest.mark.slow
def test_pinned_pair_by_size_against_simulation():
    t = 0.2
    table = estimate_pairconn_by_size(t, GILBERT, BOX, 1.5, 4, 20000, RNG)
    row = table.row("3")
    assert row.estimate == pytest.approx(pair_cluster_size_exact_small(t, GILBERT, 1.5, 1), abs=4 * row.stderr)


def test_pair_connectedness_is_symmetric():
    table = estimate_pairconn(0.3, GILBERT, BOX, [1.5, -1.5], 4000, RNG)
    plus, minus = table.rows
    assert plus.estimate > 0
    assert plus.estimate == pytest.approx(minus.estimate, abs=4 * math.hypot(plus.stderr, minus.stderr))


def test_background_points_only_add_connections():
    # the pin edge uses the same uniform at every intensity, so hits at t > 0 contain those at t = 0
    smooth = ConnectionFunction.exponential(1.0)
    box = BoxGeometry(side_length=60.0)
    empty = estimate_pairconn(0.0, smooth, box, [1.0], 2000, RNG).rows[0]
    crowded = estimate_pairconn(0.3, smooth, box, [1.0], 2000, RNG).rows[0]
    assert crowded.estimate >= empty.estimate
    assert crowded.estimate >= math.exp(-1.0) - 3 * crowded.stderr

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpwgan.measures import (
    DEFAULT_GMM,
    CostSpec,
    DiscreteMeasure,
    GmmComponent,
    GmmSpec,
    cost,
    cost_grad_x,
    cost_matrix,
    data_scale,
    distance_matrix,
    empirical_measure,
    lq_distance,
    sample_gmm,
    sample_source,
)
from qpwgan.rng import make_rng, split

coords = st.floats(-10, 10, allow_nan=False)
points2 = st.lists(coords, min_size=2, max_size=2)
exponents = st.sampled_from([1.0, 1.2, 1.5, 2.0, 3.0, 5.0])


def test_lq_distance_examples():
    assert lq_distance((0, 0), (3, 4), 2) == 5.0
    assert lq_distance((0, 0), (3, 4), 1) == 7.0
    assert lq_distance((1.5, -2), (1.5, -2), 3.3) == 0.0


def test_lq_distance_errors():
    with pytest.raises(ValueError):
        lq_distance((0, 0), (1, 2, 3), 2)
    with pytest.raises(ValueError):
        lq_distance((0, 0), (1, 2), 0.5)


def test_cost_examples():
    assert cost((0, 0), (3, 4), CostSpec(2, 2)) == 12.5
    assert cost((0, 0), (3, 4), CostSpec(2, 1)) == 5.0
    assert cost((0, 0), (1, 1), CostSpec(1, 3)) == pytest.approx(8 / 3, abs=1e-15)


@pytest.mark.parametrize("q,p", [(0.5, 1), (1, 0.9), (float("inf"), 1)])
def test_cost_spec_rejects_bad_exponents(q, p):
    with pytest.raises(ValueError):
        CostSpec(q, p)


@settings(max_examples=200, deadline=None)
@given(points2, points2, points2, exponents)
def test_triangle_inequality(x, y, z, q):
    assert lq_distance(x, z, q) <= lq_distance(x, y, q) + lq_distance(y, z, q) + 1e-12


@settings(max_examples=200, deadline=None)
@given(points2, points2, exponents, exponents)
def test_cost_symmetric(x, y, q, p):
    spec = CostSpec(q, p)
    assert cost(x, y, spec) == cost(y, x, spec)


@settings(max_examples=200, deadline=None)
@given(points2, points2, exponents, exponents)
def test_distance_non_increasing_in_q(x, y, q1, q2):
    lo, hi = sorted((q1, q2))
    assert lq_distance(x, y, hi) <= lq_distance(x, y, lo) * (1 + 1e-12) + 1e-12


def test_matrices_match_pointwise():
    rng = make_rng(3)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    spec = CostSpec(1.2, 5.0)
    D = distance_matrix(X, Y, spec.q)
    C = cost_matrix(X, Y, spec)
    for i in range(4):
        for j in range(5):
            assert D[i, j] == pytest.approx(lq_distance(X[i], Y[j], spec.q), rel=1e-13)
            assert C[i, j] == pytest.approx(cost(X[i], Y[j], spec), rel=1e-13)


@pytest.mark.parametrize("q,p", [(1.0, 1.0), (1.2, 2.0), (2.0, 1.0), (2.0, 2.0), (5.0, 1.2)])
def test_cost_grad_matches_finite_differences(q, p):
    rng = make_rng(11)
    spec = CostSpec(q, p)
    for _ in range(20):
        x, y = rng.normal(size=3), rng.normal(size=3)
        g = cost_grad_x(x, y, spec)
        h = 1e-6
        fd = np.array([(cost(x + h * e, y, spec) - cost(x - h * e, y, spec)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_cost_grad_zero_at_coincident_points():
    np.testing.assert_array_equal(cost_grad_x(np.ones(2), np.ones(2), CostSpec(2, 1)), 0.0)


def test_empirical_measure_examples():
    m = empirical_measure([[1.0, 2.0]])
    assert m.weights.tolist() == [1.0]
    m = empirical_measure([[0.0], [1.0]])
    assert m.weights.tolist() == [0.5, 0.5]
    m = empirical_measure([[3.0, 3.0], [3.0, 3.0]])
    assert len(m) == 2 and m.weights.tolist() == [0.5, 0.5]
    assert m.merged() == {(3.0, 3.0): 1.0}


def test_empirical_measure_rejects_empty():
    with pytest.raises(ValueError):
        empirical_measure([])


@settings(max_examples=100, deadline=None)
@given(st.lists(points2, min_size=1, max_size=30))
def test_empirical_measure_invariants(pts):
    m = empirical_measure(pts)
    assert abs(m.weights.sum() - 1.0) <= 1e-12
    assert np.all(m.weights >= 0) and len(m.atoms) == len(m.weights)


def test_discrete_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.5, -0.5])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.0])
    with pytest.raises(ValueError):
        DiscreteMeasure([[np.nan]], [1.0])


def test_sample_gmm_counts_and_determinism():
    spec = GmmSpec.from_dict(DEFAULT_GMM)
    assert [c.count for c in spec.components] == [60, 30, 50]
    a = sample_gmm(spec, make_rng(0))
    b = sample_gmm(spec, make_rng(0))
    assert a.shape == (140, 2)
    np.testing.assert_array_equal(a, b)
    # Components are drawn in order; each block sits near its mean.
    for comp, block in zip(spec.components, np.split(a, [60, 90])):
        assert np.linalg.norm(block.mean(axis=0) - comp.mean) < 0.3


def test_sample_gmm_tiny_covariance():
    spec = GmmSpec([GmmComponent([1.0, -1.0], 1e-12, 5)])
    pts = sample_gmm(spec, make_rng(1))
    assert pts.shape == (5, 2)
    assert np.max(np.abs(pts - [1.0, -1.0])) < 1e-4


def test_gmm_validation():
    with pytest.raises(ValueError):
        GmmComponent([0.0, 0.0], [[1.0, 2.0], [0.0, 1.0]], 3)
    with pytest.raises(ValueError):
        GmmComponent([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], 3)
    with pytest.raises(ValueError):
        GmmComponent([0.0, 0.0], 1.0, 0)
    with pytest.raises(ValueError):
        GmmSpec([GmmComponent([0.0], 1.0, 1), GmmComponent([0.0, 0.0], 1.0, 1)])


def test_gmm_dict_round_trip():
    spec = GmmSpec.from_dict(DEFAULT_GMM)
    again = GmmSpec.from_dict(spec.to_dict())
    for a, b in zip(spec.components, again.components):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)
        assert a.count == b.count


def test_sample_source():
    g = sample_source("gaussian", 2, 64, make_rng(5))
    assert g.shape == (64, 2)
    np.testing.assert_array_equal(g, sample_source("gaussian", 2, 64, make_rng(5)))
    u = sample_source("uniform-cube", 1, 3, make_rng(5))
    assert u.shape == (3, 1) and np.all(np.abs(u) <= 1.0)
    with pytest.raises(ValueError):
        sample_source("laplace", 2, 3, make_rng(5))


def test_rng_split_streams_differ_and_repeat():
    a, b = split(7, 2)
    c, d = split(7, 2)
    x, y = a.random(5), b.random(5)
    assert not np.array_equal(x, y)
    np.testing.assert_array_equal(x, c.random(5))
    np.testing.assert_array_equal(y, d.random(5))
    with pytest.raises(ValueError):
        make_rng(-1)


def test_data_scale():
    assert data_scale([[0.0, 0.0], [3.0, 1.0]]) == 3.0
    assert data_scale([[2.0, 2.0]]) == 1.0

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ringseg import (PointCloud, SimilarityParams, apply_affine,
                     compose_affine, estimate_similarity, identity_affine,
                     invert_affine, similarity_to_affine)
from ringseg.geometry import apply_affine_to_points, apply_similarity

SIX = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0],
                [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])


def small_cloud():
    return PointCloud(SIX, 3)


def affines(max_abs=3.0):
    elem = st.floats(-max_abs, max_abs, allow_nan=False, allow_infinity=False)
    return st.lists(elem, min_size=6, max_size=6).map(
        lambda v: np.array(v).reshape(2, 3))


def test_point_cloud_rejects_bad_shapes():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)), 2)          # T < 6
    with pytest.raises(ValueError):
        PointCloud(np.zeros((7, 2)), 3)          # odd T
    with pytest.raises(ValueError):
        PointCloud(SIX, 2)                       # inner_count != T/2
    with pytest.raises(ValueError):
        PointCloud.from_chains(SIX[:3], SIX[:2])  # mismatched chains
    bad = SIX.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        PointCloud(bad, 3)


def test_point_cloud_chain_views():
    pc = small_cloud()
    assert pc.num_points == 6
    assert np.array_equal(pc.inner, SIX[:3])
    assert np.array_equal(pc.outer, SIX[3:])
    assert np.allclose(pc.centroid(), SIX.mean(axis=0))


def test_apply_affine_identity():
    pc = small_cloud()
    out = apply_affine(identity_affine(), pc)
    assert np.array_equal(out.points, pc.points)
    assert out.inner_count == pc.inner_count


def test_apply_affine_translation():
    theta = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, -2.0]])
    out = apply_affine_to_points(theta, [[0.0, 0.0]])
    assert np.allclose(out[0], [5.0, -2.0])


def test_apply_affine_quarter_turn():
    theta = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
    out = apply_affine_to_points(theta, [[1.0, 0.0]])
    assert np.allclose(out[0], [0.0, 1.0])


def test_apply_affine_rejects_nonfinite():
    theta = identity_affine()
    theta[0, 0] = np.inf
    with pytest.raises(ValueError):
        apply_affine(theta, small_cloud())


def test_invert_affine_identity_and_translation():
    assert np.allclose(invert_affine(identity_affine()), identity_affine())
    theta = np.array([[1.0, 0.0, 5.0], [0.0, 1.0, -2.0]])
    inv = invert_affine(theta)
    assert np.allclose(inv, [[1.0, 0.0, -5.0], [0.0, 1.0, 2.0]])


def test_invert_affine_roundtrip_fixed():
    theta = np.array([[2.0, 1.0, 3.0], [0.0, 1.0, -4.0]])  # det = 2
    rng = np.random.default_rng(0)
    pts = rng.uniform(-10.0, 10.0, (10, 2))
    back = apply_affine_to_points(invert_affine(theta),
                                  apply_affine_to_points(theta, pts))
    assert np.max(np.abs(back - pts)) < 1e-9


@settings(max_examples=50)
@given(affines())
def test_invert_affine_roundtrip_random(theta):
    det = theta[0, 0] * theta[1, 1] - theta[0, 1] * theta[1, 0]
    assume(abs(det) > 1e-3)
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, -3.0]])
    back = apply_affine_to_points(invert_affine(theta),
                                  apply_affine_to_points(theta, pts))
    assert np.max(np.abs(back - pts)) < 1e-6


def test_invert_affine_singular():
    theta = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]])
    with pytest.raises(ValueError, match="degenerate affine"):
        invert_affine(theta)


def test_compose_affine_matches_sequential():
    rng = np.random.default_rng(3)
    for _ in range(10):
        first = rng.uniform(-2.0, 2.0, (2, 3))
        second = rng.uniform(-2.0, 2.0, (2, 3))
        pts = rng.uniform(-5.0, 5.0, (8, 2))
        seq = apply_affine_to_points(second, apply_affine_to_points(first, pts))
        combined = apply_affine_to_points(compose_affine(second, first), pts)
        assert np.max(np.abs(seq - combined)) < 1e-9


def test_similarity_to_affine_cases():
    ident = SimilarityParams(1.0, 0.0, np.zeros(2))
    assert np.allclose(similarity_to_affine(ident), identity_affine())
    double = SimilarityParams(2.0, 0.0, np.zeros(2))
    assert np.allclose(similarity_to_affine(double),
                       [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    quarter = SimilarityParams(1.0, np.pi / 2, np.zeros(2))
    assert np.allclose(similarity_to_affine(quarter),
                       [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]], atol=1e-12)


def test_similarity_requires_positive_scale():
    with pytest.raises(ValueError):
        SimilarityParams(0.0, 0.0, np.zeros(2))
    with pytest.raises(ValueError):
        SimilarityParams(-1.0, 0.0, np.zeros(2))


def test_estimate_similarity_translation():
    src = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    sim = estimate_similarity(src, src + np.array([3.0, 4.0]))
    assert abs(sim.scale - 1.0) < 1e-12
    assert abs(sim.rotation) < 1e-12
    assert np.allclose(sim.translation, [3.0, 4.0])


def test_estimate_similarity_pure_scale():
    src = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, -1.0]])
    sim = estimate_similarity(src, 2.0 * src)
    assert abs(sim.scale - 2.0) < 1e-12
    assert abs(sim.rotation) < 1e-12
    assert np.allclose(sim.translation, 0.0, atol=1e-12)


@settings(max_examples=50)
@given(st.floats(0.2, 5.0), st.floats(-3.1, 3.1),
       st.floats(-50.0, 50.0), st.floats(-50.0, 50.0))
def test_estimate_similarity_recovers_exact_maps(scale, rot, tx, ty):
    src = np.array([[0.0, 0.0], [4.0, 1.0], [-2.0, 3.0]])
    true = SimilarityParams(scale, rot, np.array([tx, ty]))
    dst = apply_similarity(true, src)
    sim = estimate_similarity(src, dst)
    assert np.max(np.abs(apply_similarity(sim, src) - dst)) < 1e-9


def test_estimate_similarity_least_squares_on_noisy_points():
    rng = np.random.default_rng(7)
    src = rng.uniform(-5.0, 5.0, (30, 2))
    true = SimilarityParams(1.7, 0.4, np.array([2.0, -1.0]))
    dst = apply_similarity(true, src) + rng.normal(0.0, 0.01, src.shape)
    sim = estimate_similarity(src, dst)
    assert abs(sim.scale - true.scale) < 0.01
    assert abs(sim.rotation - true.rotation) < 0.01


def test_estimate_similarity_degenerate():
    same = np.ones((4, 2))
    other = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError, match="degenerate configuration"):
        estimate_similarity(same, other)
    with pytest.raises(ValueError):
        estimate_similarity(other[:1], same[:1])  # fewer than 2 points

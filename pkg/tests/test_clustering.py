import numpy as np
import pytest

from helpers import blob_data
from icmlm.clustering import KMeansResult, build_cluster_concepts, kmeans


def brute_force_assign(points, centroids_dk):
    """Independent nearest-centroid assignment: explicit distance loop."""
    centers = centroids_dk.T
    out = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        d = [(np.sum((p - c) ** 2), j) for j, c in enumerate(centers)]
        out[i] = min(d)[1]
    return out


def test_n_equals_k_zero_objective():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(6, 3))
    res = kmeans(pts, k=6, seed=1)
    assert res.objective == pytest.approx(0.0, abs=1e-12)
    assert sorted(res.labels.tolist()) == list(range(6))


def test_two_separated_blobs_recovered():
    pts, truth = blob_data(30, centers=[(-10, -10), (10, 10)], spread=0.5, seed=3)
    res = kmeans(pts, k=2, seed=0)
    # brute-force nearest-centroid oracle agrees with returned assignments
    np.testing.assert_array_equal(res.labels, brute_force_assign(pts, res.centroids))
    # clusters coincide with blob identity (up to label swap)
    agreement = (res.labels == truth).mean()
    assert agreement in (0.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_objective_monotone_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(80, 5))
    res = kmeans(pts, k=7, seed=seed)
    diffs = np.diff(res.objective_history)
    assert (diffs <= 1e-9).all(), res.objective_history


@pytest.mark.parametrize("seed", range(5))
def test_final_assignment_is_nearest_centroid(seed):
    rng = np.random.default_rng(100 + seed)
    pts = rng.normal(size=(60, 4))
    res = kmeans(pts, k=6, seed=seed)
    np.testing.assert_array_equal(res.labels, brute_force_assign(pts, res.centroids))


def test_duplicate_points_do_not_crash():
    pts = np.zeros((10, 2))
    res = kmeans(pts, k=3, seed=2)
    assert res.objective == pytest.approx(0.0, abs=1e-12)


def test_centroid_orientation_and_one_hot():
    pts = np.random.default_rng(4).normal(size=(20, 5))
    res = build_cluster_concepts(pts, k=4, seed=0)
    assert isinstance(res, KMeansResult)
    assert res.centroids.shape == (5, 4)  # one centroid per column
    oh = res.one_hot()
    assert oh.shape == (20, 4)
    assert (oh.sum(axis=1) == 1).all()
    np.testing.assert_array_equal(oh.argmax(axis=1), res.labels)


def test_bad_k_rejected():
    pts = np.zeros((3, 2))
    with pytest.raises(ValueError):
        kmeans(pts, k=4, seed=0)
    with pytest.raises(ValueError):
        kmeans(pts, k=0, seed=0)


def test_seed_determinism():
    pts = np.random.default_rng(9).normal(size=(50, 3))
    a = kmeans(pts, k=5, seed=7)
    b = kmeans(pts, k=5, seed=7)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.centroids, b.centroids)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adaptive_trav.errors import InvalidInputError
from adaptive_trav.feature_space import (
    ClusterSet, fit_clusters, is_ood, kmeans, load_clusters, nearest_class, ood_score,
    save_clusters, subsample, vlad_descriptor,
)


def _blobs(seed=0, n=200):
    rng = np.random.default_rng(seed)
    means = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([m + 0.3 * rng.standard_normal((n, 2)) for m in means])
    return x, means


def test_kmeans_recovers_separated_blobs():
    x, means = _blobs()
    res = kmeans(x, 3, seed=1)
    # match each true mean to its closest fitted center
    d = np.linalg.norm(res.centers[:, None] - means[None], axis=2)
    assert sorted(d.argmin(axis=0)) == [0, 1, 2]
    assert d.min(axis=0).max() < 0.1
    # each blob lands in a single cluster
    for b in range(3):
        assert len(set(res.labels[b * 200:(b + 1) * 200])) == 1


def test_kmeans_objective_never_increases():
    x = np.random.default_rng(3).standard_normal((300, 4))
    res = kmeans(x, 8, seed=0)
    h = np.array(res.objective_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_kmeans_seeded_and_rejects_bad_k():
    x, _ = _blobs()
    a, b = kmeans(x, 3, seed=5), kmeans(x, 3, seed=5)
    np.testing.assert_array_equal(a.centers, b.centers)
    with pytest.raises(InvalidInputError):
        kmeans(x[:2], 3, seed=0)
    with pytest.raises(InvalidInputError):
        kmeans(x, 1, seed=0)
    with pytest.raises(InvalidInputError):
        kmeans(np.ones((10, 2)), 3, seed=0)


def test_tau_is_percentile_of_nearest_l1():
    x, _ = _blobs(seed=2)
    cs = fit_clusters(x, 3, seed=0, tau_percentile=95)
    # oracle: explicit loop over samples
    mins = [min(np.abs(row - c).sum() for c in cs.centers) for row in x]
    assert cs.tau == pytest.approx(np.percentile(mins, 95), rel=1e-12)


def test_vlad_hand_values():
    cs = ClusterSet(np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]]), tau=0.5)
    d = vlad_descriptor([1.0, 2.0], cs)
    np.testing.assert_array_equal(d, [3.0, 1.0, 3.0])
    assert nearest_class(d) == 1
    assert ood_score(d) == 1.0
    assert is_ood(d, cs)
    assert not is_ood(d, cs.with_tau(1.0))
    batch = vlad_descriptor([[1.0, 2.0], [3.0, 3.0]], cs)
    np.testing.assert_array_equal(nearest_class(batch), [1, 2])
    with pytest.raises(InvalidInputError):
        vlad_descriptor([1.0, 2.0, 3.0], cs)


def test_nearest_class_first_index_on_ties():
    assert nearest_class([2.0, 1.0, 1.0]) == 1


def test_cluster_set_validation():
    with pytest.raises(InvalidInputError):
        ClusterSet(np.zeros((2, 2)), 1.0)
    with pytest.raises(InvalidInputError):
        ClusterSet(np.eye(2), 0.0)
    with pytest.raises(InvalidInputError):
        ClusterSet(np.eye(3)[:1], 1.0)
    cs = ClusterSet(np.eye(2), 1.0)
    with pytest.raises(ValueError):
        cs.centers[0, 0] = 5.0


def test_cluster_file_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((100, 5))
    cs = fit_clusters(x, 4, seed=0)
    save_clusters(cs, tmp_path / "c.txt")
    back = load_clusters(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.centers, cs.centers)
    assert back.tau == cs.tau
    (tmp_path / "bad.txt").write_text("3 2 0.5\n0 0\n1 1\n")
    with pytest.raises(InvalidInputError):
        load_clusters(tmp_path / "bad.txt")


def test_subsample_without_replacement():
    x = np.arange(40.0).reshape(20, 2)
    s = subsample(x, 7, seed=0)
    assert len(s) == 7 and len(np.unique(s[:, 0])) == 7
    assert len(subsample(x, 50, seed=0)) == 20


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-50, 50)),
       arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_vlad_properties(centers, d):
    if len(np.unique(centers, axis=0)) < 6:
        return
    cs = ClusterSet(centers, 1.0)
    v = vlad_descriptor(d, cs)
    assert np.all(v >= 0)
    # triangle inequality between any two centers
    for a in range(6):
        for b in range(6):
            assert abs(v[a] - v[b]) <= np.abs(centers[a] - centers[b]).sum() + 1e-9
    assert v[nearest_class(v)] == v.min()


def test_k_distinct_samples_become_the_centers():
    x = np.array([[0.0, 1.0], [4.0, 4.0], [-3.0, 2.0], [9.0, 0.5]])
    res = kmeans(x, 4, seed=0)
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, x))


def test_two_blob_centers_within_standard_error():
    rng = np.random.default_rng(11)
    std, n = 0.5, 400
    a = rng.normal([0.0, 0.0], std, (n, 2))
    b = rng.normal([8.0, 3.0], std, (n, 2))
    res = kmeans(np.vstack([a, b]), 2, seed=0)
    for blob in (a, b):
        m = blob.mean(axis=0)
        d = np.abs(res.centers - m).max(axis=1).min()
        assert d <= 3 * std / np.sqrt(n)


def test_vlad_small_examples():
    cs = ClusterSet(np.array([[0.0, 0.0], [1.0, 1.0]]), 1.0)
    np.testing.assert_array_equal(vlad_descriptor([1.0, 0.0], cs), [1.0, 1.0])
    shifted = ClusterSet(cs.centers + 7.5, 1.0)
    np.testing.assert_array_equal(vlad_descriptor([8.5, 7.5], shifted), [1.0, 1.0])
    assert nearest_class([0.4, 0.1, 0.9]) == 1
    assert nearest_class([0.2, 0.2]) == 0
    tau4 = ClusterSet(np.eye(2), 4.0)
    assert is_ood([5.0, 6.0], tau4)
    assert not is_ood([3.9, 6.0], tau4)


def test_centers_map_to_themselves():
    x = np.random.default_rng(4).standard_normal((80, 3))
    cs = fit_clusters(x, 5, seed=0)
    d = vlad_descriptor(cs.centers, cs)
    np.testing.assert_array_equal(np.diag(d), 0.0)
    np.testing.assert_array_equal(nearest_class(d), np.arange(5))
    assert not np.any(is_ood(d, cs))

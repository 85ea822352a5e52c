import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovpano.cloud import FeatureField, PointCloud
from ovpano.demo import LABEL_SET, demo_provider, make_scene
from ovpano.embed import normalize
from ovpano.pseudolabel import (PseudoLabelSet, adaptive_dbscan, class_density_params, derive_labels,
                                renumber_by_first_member, spherical_kmeans)

from oracles import reference_dbscan


def best_two_partition(x):
    """Brute force: maximize |sum A| + |sum B| over all splits (first point fixed in A)."""
    n = len(x)
    masks = (np.arange(2 ** (n - 1))[:, None] >> np.arange(n - 1)) & 1
    masks = np.hstack([np.zeros((len(masks), 1), dtype=int), masks]).astype(float)
    total = x.sum(0)
    sb = masks @ x
    score = np.linalg.norm(total - sb, axis=1) + np.linalg.norm(sb, axis=1)
    return masks[int(np.argmax(score))].astype(int)


def test_kmeans_single_cluster_is_normalized_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 5)) + [3, 0, 0, 0, 0]
    res = spherical_kmeans(x, 1)
    np.testing.assert_allclose(res.centroids[0], normalize(normalize(x).sum(0)), atol=1e-12)
    assert np.all(res.assignments == 0)


def test_kmeans_separates_antipodal_bundles():
    rng = np.random.default_rng(1)
    e1 = np.array([1.0, 0, 0])
    x = np.vstack([e1 + rng.normal(scale=0.1, size=(10, 3)), -e1 + rng.normal(scale=0.1, size=(10, 3))])
    x = x[rng.permutation(20)]
    res = spherical_kmeans(x, 2, seed=3)
    ref = best_two_partition(normalize(x))
    same = (res.assignments == res.assignments[0]) == (ref == ref[0])
    assert same.all()
    assert set(np.sign(x[res.assignments == 0, 0])) in ({1.0}, {-1.0})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_scale_invariant_and_monotone(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 4))
    a = spherical_kmeans(x, k, seed=seed)
    b = spherical_kmeans(3.7 * x, k, seed=seed)
    c = spherical_kmeans(x * rng.uniform(0.1, 10, size=(60, 1)), k, seed=seed)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.assignments, c.assignments)
    h = np.array(a.history)
    assert np.all(np.diff(h) >= -1e-12)
    np.testing.assert_allclose(np.linalg.norm(a.centroids, axis=1), 1.0, atol=1e-6)
    sims = normalize(x) @ a.centroids.T
    np.testing.assert_array_equal(a.assignments, np.argmax(sims, axis=1))


def test_kmeans_needs_k_points():
    with pytest.raises(ValueError):
        spherical_kmeans(np.ones((2, 3)), 3)
    with pytest.raises(ValueError):
        spherical_kmeans(np.ones((2, 3)), 0)


def test_dbscan_small_examples():
    assert list(adaptive_dbscan(np.zeros((1, 3)), 0.5, 1)) == [0]
    assert list(adaptive_dbscan(np.zeros((1, 3)), 0.5, 4)) == [-1]
    with pytest.raises(ValueError):
        adaptive_dbscan(np.zeros((1, 3)), 0.0, 1)


def test_dbscan_two_blobs_match_reference():
    rng = np.random.default_rng(2)
    eps = 0.3
    a = rng.normal(scale=0.1, size=(40, 3))
    b = a + [10 * eps + 1.0, 0, 0]
    pos = np.vstack([a, b])[rng.permutation(80)]
    labels = adaptive_dbscan(pos, eps, 4)
    assert labels.max() == 1
    np.testing.assert_array_equal(labels, reference_dbscan(pos, eps, 4))


def test_dbscan_matches_reference_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 501))
        centers = rng.uniform(-5, 5, size=(int(rng.integers(1, 6)), 3))
        pos = centers[rng.integers(0, len(centers), n)] + rng.normal(scale=rng.uniform(0.2, 1.0), size=(n, 3))
        eps = float(rng.uniform(0.2, 1.2))
        mp = int(rng.integers(1, 10))
        np.testing.assert_array_equal(adaptive_dbscan(pos, eps, mp), reference_dbscan(pos, eps, mp))


def test_renumber_by_first_member():
    np.testing.assert_array_equal(renumber_by_first_member([5, -1, 2, 5, 2, 7]), [0, -1, 1, 0, 1, 2])


def test_density_params_grid():
    g = np.arange(12.0)
    grid = np.array([(x, y, z) for x in g for y in g for z in g])
    eps, _ = class_density_params(grid, eps_scale=1.5)
    assert eps == pytest.approx(1.5)
    eps2, _ = class_density_params(2 * grid, eps_scale=1.5)
    assert eps2 == 2 * eps
    rng = np.random.default_rng(4)
    _, mp = class_density_params(rng.random((1024, 3)), base_minpts=4)
    assert mp == 10
    with pytest.raises(ValueError):
        class_density_params(np.zeros((1, 3)))


def demo_field(cloud, provider, unlabeled_every=7):
    concepts = np.array([provider.text_embed(LABEL_SET[c]) for c in cloud.gt_semantic])
    hits = np.ones(len(cloud), dtype=np.int64)
    hits[::unlabeled_every] = 0
    concepts[hits == 0] = 0
    return FeatureField(concepts, hits)


def test_derive_labels_on_demo_scene():
    cloud = make_scene()
    prov = demo_provider()
    fld = demo_field(cloud, prov)
    labels = derive_labels(cloud, fld, 2, prov, seed=0)
    assert labels.n_classes == 2
    lab = fld.hit_count > 0
    # classes recover the concepts up to renaming
    pairs = set(zip(labels.z_pc[lab].tolist(), cloud.gt_semantic[lab].tolist()))
    assert len(pairs) == 2
    thing_class = labels.z_pc[np.flatnonzero((cloud.gt_semantic == 0) & lab)[0]]
    assert labels.is_thing[thing_class] and not labels.is_thing[1 - thing_class]
    assert labels.n_instances == 3
    assert np.all(labels.z_pc[~lab] == -1) and np.all(labels.z_pi[~lab] == -1)
    assert np.all(labels.z_pi[labels.z_pc != thing_class] == -1)
    inst = labels.z_pi[lab & (cloud.gt_semantic == 0)]
    gt = cloud.gt_instance[lab & (cloud.gt_semantic == 0)]
    assert len(set(zip(inst.tolist(), gt.tolist()))) == 3


def test_derive_labels_one_blob_one_instance():
    rng = np.random.default_rng(5)
    prov = demo_provider()
    cloud = PointCloud(rng.normal(scale=0.2, size=(100, 3)))
    vec = prov.text_embed(LABEL_SET[0])
    labels = derive_labels(cloud, FeatureField(np.tile(vec, (100, 1)), np.ones(100, dtype=int)), 1, prov)
    assert labels.is_thing[0] and labels.n_instances == 1


def test_derive_labels_requires_coverage():
    cloud = PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        derive_labels(cloud, FeatureField.empty(3, 4), 1, demo_provider())


def test_labels_roundtrip(tmp_path):
    cloud = make_scene()
    prov = demo_provider()
    labels = derive_labels(cloud, demo_field(cloud, prov), 2, prov)
    labels.save(cloud, tmp_path / "labels.ply")
    back = PseudoLabelSet.load(tmp_path / "labels.ply")
    np.testing.assert_array_equal(back.z_pc, labels.z_pc)
    np.testing.assert_array_equal(back.z_pi, labels.z_pi)
    np.testing.assert_array_equal(back.is_thing, labels.is_thing)
    np.testing.assert_allclose(back.class_repr, labels.class_repr, atol=1e-6)
    assert back.per_class_params == labels.per_class_params

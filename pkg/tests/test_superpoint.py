import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovpano.cloud import FeatureField, PointCloud
from ovpano.demo import demo_provider, make_scene
from ovpano.pseudolabel import PseudoLabelSet, derive_labels
from ovpano.superpoint import (GEOM_DIM, Level, SuperpointHierarchy, build_adjacency, build_hierarchy,
                               knn_indices, partition_energy, partition_level, propagate_targets,
                               symmetric)

from oracles import brute_knn, exhaustive_min_energy, partition_energy_direct
from test_pseudolabel import demo_field


def random_graph(rng, n, p=0.4):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    # a path keeps the graph connected
    edges += [(i, i + 1) for i in range(n - 1)]
    return np.unique(np.array(edges, dtype=np.int64).reshape(-1, 2), axis=0)


def test_knn_matches_brute_force():
    pts = np.random.default_rng(0).random((200, 3))
    np.testing.assert_array_equal(knn_indices(pts, 6), brute_knn(pts, 6))


def test_knn_grid_ties_follow_index():
    g = np.arange(5.0)
    pts = np.array([(x, y, 0.0) for x in g for y in g])
    np.testing.assert_array_equal(knn_indices(pts, 4), brute_knn(pts, 4))


def test_adjacency_collinear_and_degree():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert build_adjacency(pts, 1).tolist() == [[0, 1], [1, 2]]
    rng = np.random.default_rng(1)
    pts = rng.random((100, 3))
    e = build_adjacency(pts, 5)
    assert np.all(np.bincount(e.ravel(), minlength=100) >= 5)
    with pytest.raises(ValueError):
        build_adjacency(pts[:3], 3)


def test_partition_identical_features_single_component():
    rng = np.random.default_rng(2)
    edges = random_graph(rng, 30)
    res = partition_level(np.ones((30, 4)), edges, 0.1)
    assert res.n_components == 1


def test_partition_huge_lambda_single_component():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    edges = random_graph(rng, 40)
    lam = float(((x - x.mean(0)) ** 2).sum())
    assert partition_level(x, edges, lam).n_components == 1


def test_partition_two_blobs():
    x = np.array([0.0] * 4 + [1.0] * 4)[:, None]
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7]])
    res = partition_level(x, edges, 0.1)
    assert res.labels.tolist() == [0] * 4 + [1] * 4
    assert res.energy == pytest.approx(exhaustive_min_energy(x, edges.tolist(), 0.1), abs=1e-12)
    big = np.repeat(x, 5, axis=0)
    chain = np.array([[i, i + 1] for i in range(39)])
    res = partition_level(big, chain, 0.1)
    assert res.n_components == 2


def test_partition_matches_exhaustive_on_tiny_graphs():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(n, 2))
        edges = random_graph(rng, n)
        lam = float(rng.uniform(0.05, 2.0))
        res = partition_level(x, edges, lam)
        ref = exhaustive_min_energy(x, edges.tolist(), lam)
        assert res.energy == pytest.approx(partition_energy_direct(x, edges.tolist(), res.labels, lam), abs=1e-12)
        worst = max(worst, abs(res.energy - ref))
    assert worst < 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(9, 60))
def test_greedy_energy_strictly_decreases(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3)) + (np.arange(n) > n // 2)[:, None] * 3
    edges = random_graph(rng, n, 0.1)
    lam = float(rng.uniform(0.01, 3.0))
    res = partition_level(x, edges, lam)
    h = np.array(res.history)
    assert np.all(np.diff(h) < 0)
    assert res.energy == pytest.approx(partition_energy(x, edges, res.labels, lam), rel=1e-12)
    assert res.energy <= h[0]
    # ids numbered by lowest member
    first = [int(np.flatnonzero(res.labels == c)[0]) for c in range(res.n_components)]
    assert first == sorted(first)


def test_partition_is_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3))
    edges = random_graph(rng, 50, 0.1)
    a = partition_level(x, edges, 0.5)
    b = partition_level(x, edges, 0.5)
    np.testing.assert_array_equal(a.labels, b.labels)


def single_level(n_points):
    return SuperpointHierarchy([Level(np.zeros(n_points, dtype=np.int64), np.zeros((0, 2), dtype=np.int64),
                                      np.zeros((0, 10)), np.zeros((1, GEOM_DIM)), np.array([n_points]))],
                               n_points)


def labels_for(z_pc, class_repr, is_thing=None):
    z_pc = np.asarray(z_pc)
    k = len(class_repr)
    return PseudoLabelSet(z_pc, np.full(len(z_pc), -1), np.asarray(class_repr, dtype=float),
                          np.zeros(k, bool) if is_thing is None else np.asarray(is_thing), [None] * k)


def test_targets_degenerate_superpoint():
    v = np.array([0.6, 0.8, 0.0])
    reprs = np.eye(3)
    hier = propagate_targets(single_level(5), FeatureField(np.tile(v, (5, 1)), np.ones(5, dtype=int)),
                             labels_for([2] * 5, reprs))
    t = hier.levels[0].targets[0]
    np.testing.assert_allclose(t, [v, v, reprs[2]], atol=1e-12)
    assert hier.levels[0].target_mask[0]


def test_targets_seven_three_split():
    a, b = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    rng = np.random.default_rng(5)
    feats = np.array([a] * 7 + [b] * 3) + rng.normal(scale=1e-3, size=(10, 3))
    hier = propagate_targets(single_level(10), FeatureField(feats, np.ones(10, dtype=int)),
                             labels_for([0] * 10, np.eye(3)[:1]))
    t1, t2, _ = hier.levels[0].targets[0]
    assert t1 @ a > 0.999 and t2 @ b > 0.999
    np.testing.assert_allclose(np.linalg.norm([t1, t2], axis=1), 1.0, atol=1e-5)


def test_targets_majority_tie_takes_lower_class():
    hier = propagate_targets(single_level(4), FeatureField(np.tile([1.0, 0, 0], (4, 1)), np.ones(4, dtype=int)),
                             labels_for([1, 0, 1, 0], np.eye(3)[:2]))
    assert hier.levels[0].majority_class[0] == 0


def test_targets_unlabeled_superpoint_is_masked():
    hier = propagate_targets(single_level(3), FeatureField.empty(3, 4), labels_for([-1] * 3, np.eye(4)[:1]))
    assert not hier.levels[0].target_mask[0]
    assert np.all(hier.levels[0].targets == 0)


def test_constant_blob_collapses_every_level():
    rng = np.random.default_rng(6)
    cloud = PointCloud(rng.normal(scale=0.1, size=(60, 3)) * [1, 1, 0], np.full((60, 3), 0.5))
    hier = build_hierarchy(cloud, None, None, levels=3, lams=(10.0, 10.0, 10.0), k_nn=5)
    assert all(lv.size == 1 for lv in hier.levels)
    assert hier.depth == 1


@pytest.fixture(scope="module")
def demo_hierarchy():
    cloud = make_scene()
    prov = demo_provider()
    fld = demo_field(cloud, prov)
    labels = derive_labels(cloud, fld, 2, prov)
    return cloud, build_hierarchy(cloud, labels, fld, levels=3, lams=(0.01, 0.1, 1.0), k_nn=10)


def test_demo_hierarchy_structure(demo_hierarchy):
    cloud, hier = demo_hierarchy
    sizes = [lv.size for lv in hier.levels]
    assert hier.depth == 3
    assert all(a > b for a, b in zip([len(cloud)] + sizes, sizes))
    prev = len(cloud)
    for lv in hier.levels:
        assert len(lv.parent_of) == prev
        assert set(lv.parent_of.tolist()) == set(range(lv.size))
        pairs = set(map(tuple, lv.edges.tolist()))
        assert all((b, a) in pairs for a, b in pairs)
        assert lv.edge_feat.shape == (len(lv.edges), 10)
        assert np.isfinite(lv.sp_geom).all() and np.isfinite(lv.edge_feat).all()
        t = lv.targets[lv.target_mask]
        np.testing.assert_allclose(np.linalg.norm(t[:, :2], axis=-1), 1.0, atol=1e-5)
        prev = lv.size
    top = hier.point_assignment(hier.depth)
    assert top.shape == (len(cloud),) and top.min() >= 0 and top.max() < hier.levels[-1].size
    assert np.all(hier.levels[0].point_count >= 1)


def test_hierarchy_roundtrip(demo_hierarchy, tmp_path):
    _, hier = demo_hierarchy
    hier.save(tmp_path)
    back = SuperpointHierarchy.load(tmp_path)
    assert back.depth == hier.depth
    for a, b in zip(hier.levels, back.levels):
        np.testing.assert_array_equal(a.parent_of, b.parent_of)
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_allclose(b.targets, a.targets, atol=1e-6)
        np.testing.assert_array_equal(a.target_mask, b.target_mask)
        np.testing.assert_array_equal(a.majority_instance, b.majority_instance)


def test_symmetric_edges():
    assert symmetric(np.array([[1, 0], [1, 2], [0, 1]])).tolist() == [[0, 1], [1, 0], [1, 2], [2, 1]]

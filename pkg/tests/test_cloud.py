import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ovpano.cloud import (FeatureField, PlyError, PointCloud, load_cloud, read_field, save_cloud,
                          voxel_downsample, write_field, write_ply)

from oracles import hash_grid_downsample


def write_ascii(path, body, header_extra=""):
    path.write_text("ply\nformat ascii 1.0\nelement vertex 3\n"
                    "property float x\nproperty float y\nproperty float z\n"
                    f"{header_extra}end_header\n{body}")


def test_ascii_xyz_only_gets_gray(tmp_path):
    p = tmp_path / "a.ply"
    write_ascii(p, "0 0 0\n1 0 0\n0 1 0\n")
    cloud = load_cloud(p, "ply_ascii")
    assert len(cloud) == 3
    np.testing.assert_array_equal(cloud.colors, np.full((3, 3), 0.5))
    assert cloud.gt_semantic is None


def test_binary_roundtrip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(50, 3)) * 1e3, rng.random((50, 3)),
                       rng.integers(0, 5, 50), rng.integers(-1, 3, 50))
    p = tmp_path / "b.ply"
    save_cloud(cloud, p)
    back = load_cloud(p, "ply_binary")
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.colors.tobytes() == cloud.colors.tobytes()
    np.testing.assert_array_equal(back.gt_semantic, cloud.gt_semantic)
    np.testing.assert_array_equal(back.gt_instance, cloud.gt_instance)


def test_eight_bit_colors_scale_to_unit(tmp_path):
    p = tmp_path / "c.ply"
    write_ascii(p, "0 0 0 255 0 128\n1 0 0 0 0 0\n0 1 0 10 20 30\n",
                "property uchar red\nproperty uchar green\nproperty uchar blue\n")
    cloud = load_cloud(p)
    np.testing.assert_allclose(cloud.colors[0], [1.0, 0.0, 128 / 255])


def test_nan_coordinate_ascii_names_offset(tmp_path):
    p = tmp_path / "n.ply"
    write_ascii(p, "0 0 0\n1 nan 0\n0 1 0\n")
    with pytest.raises(PlyError) as err:
        load_cloud(p)
    assert "byte offset" in str(err.value)
    assert err.value.offset == p.read_bytes().index(b"1 nan")


def test_nan_coordinate_binary_names_vertex_offset(tmp_path):
    pos = np.array([[0, 0, 0], [1, np.nan, 0], [0, 1, 0]], dtype=np.float32)
    p = tmp_path / "n.ply"
    write_ply(p, {"x": pos[:, 0], "y": pos[:, 1], "z": pos[:, 2]})
    header_len = p.read_bytes().index(b"end_header\n") + len(b"end_header\n")
    with pytest.raises(PlyError) as err:
        load_cloud(p)
    assert err.value.offset == header_len + 12


def test_truncated_binary_payload(tmp_path):
    pos = np.zeros((4, 3), dtype=np.float32)
    p = tmp_path / "t.ply"
    write_ply(p, {"x": pos[:, 0], "y": pos[:, 1], "z": pos[:, 2]})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(PlyError, match="byte offset"):
        load_cloud(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "m.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex x\nend_header\n")
    with pytest.raises(PlyError):
        load_cloud(p)


def test_format_mismatch_rejected(tmp_path):
    p = tmp_path / "a.ply"
    write_ascii(p, "0 0 0\n1 0 0\n0 1 0\n")
    with pytest.raises(PlyError):
        load_cloud(p, "ply_binary")


def test_cloud_invariants():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.inf]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.full((2, 3), 1.5))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), gt_semantic=np.zeros(3))


def test_feature_field_invariants(tmp_path):
    with pytest.raises(ValueError):
        FeatureField(np.array([[np.nan, 0.0]]), np.array([1]))
    with pytest.raises(ValueError):
        FeatureField(np.zeros((2, 2)), np.array([-1, 0]))
    f = FeatureField(np.arange(6.0).reshape(3, 2), np.array([0, 2, 1]))
    write_field(tmp_path / "f.hff", f)
    g = read_field(tmp_path / "f.hff")
    np.testing.assert_array_equal(g.features, f.features)
    np.testing.assert_array_equal(g.hit_count, f.hit_count)


def test_voxel_larger_than_box_gives_centroid():
    rng = np.random.default_rng(1)
    pos = rng.random((30, 3))
    out = voxel_downsample(PointCloud(pos), 10.0)
    assert len(out) == 1
    np.testing.assert_allclose(out.positions[0], pos.mean(0))


def test_voxel_cube_corners_unchanged():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    out = voxel_downsample(PointCloud(corners), 0.5)
    np.testing.assert_array_equal(out.positions, corners)


def test_voxel_matches_hash_grid_oracle():
    rng = np.random.default_rng(2)
    pos = rng.random((10_000, 3))
    col = rng.random((10_000, 3))
    out = voxel_downsample(PointCloud(pos, col), 0.1)
    ref = hash_grid_downsample(pos, col, 0.1)
    keys = sorted(ref)
    assert len(out) == len(keys)
    np.testing.assert_allclose(out.positions, np.array([ref[k][0] for k in keys]), atol=1e-12)
    np.testing.assert_allclose(out.colors, np.array([ref[k][1] for k in keys]), atol=1e-12)


def test_voxel_majority_tie_takes_smaller_label():
    pos = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3], [0.4, 0.4, 0.4]])
    out = voxel_downsample(PointCloud(pos, gt_semantic=[5, 2, 5, 2], gt_instance=[1, 1, 0, 3]), 1.0)
    assert out.gt_semantic[0] == 2
    assert out.gt_instance[0] == 1


def test_voxel_rejects_nonpositive():
    with pytest.raises(ValueError):
        voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_voxel_outputs_stay_in_source_voxel(n, voxel, seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 3)) * 3
    out = voxel_downsample(PointCloud(pos), voxel)
    keys = sorted({tuple(np.floor(p / voxel).astype(int)) for p in pos})
    assert len(out) == len(keys) <= n
    tol = 1e-9 * max(1.0, float(np.abs(pos).max()))
    for p, k in zip(out.positions, keys):
        lo = np.array(k) * voxel
        assert np.all(p >= lo - tol) and np.all(p <= lo + voxel + tol)

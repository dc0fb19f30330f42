import numpy as np
import pytest

from osis import tensor as T
from osis.geometry import (
    PointCloud,
    densify_instance_ids,
    devoxelize,
    fuse_centroid_features,
    instances_from_cloud,
    positional_encoding,
    voxelize,
)
from osis.tensor import Parameter, Tensor, grad_check


def test_single_point_floor_rule():
    grid = voxelize(PointCloud([[0.001, 0.001, 0.001]]), 0.02)
    assert grid.n_voxels == 1
    assert grid.coords.tolist() == [[0, 0, 0]]


def test_two_far_points_two_voxels():
    grid = voxelize(PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 0.02)
    assert grid.n_voxels == 2
    assert grid.point_to_voxel.tolist() == [0, 1]
    assert [v.tolist() for v in grid.voxel_to_points] == [[0], [1]]


def test_voxel_count_matches_set_of_tuples_oracle(rng):
    pts = rng.uniform(0, 0.1, size=(1000, 3))
    grid = voxelize(PointCloud(pts), 0.02)
    origin = pts.min(axis=0)
    oracle = {tuple(np.floor((p - origin) / 0.02).astype(int)) for p in pts}
    assert grid.n_voxels == len(oracle)
    assert {tuple(c) for c in grid.coords} == oracle


def test_voxelize_invariants(rng):
    pts = rng.uniform(-1, 1, size=(400, 3))
    grid = voxelize(PointCloud(pts), 0.05)
    # unique lexicographically sorted coords
    assert len({tuple(c) for c in grid.coords}) == grid.n_voxels
    assert all(tuple(grid.coords[i]) < tuple(grid.coords[i + 1]) for i in range(grid.n_voxels - 1))
    # mapping consistency and non-empty voxels
    recomputed = np.floor((pts - pts.min(axis=0)) / 0.05).astype(np.int64)
    assert np.array_equal(grid.coords[grid.point_to_voxel], recomputed)
    assert all(len(v) >= 1 for v in grid.voxel_to_points)


def test_voxelize_requires_positive_size():
    with pytest.raises(ValueError):
        voxelize(PointCloud([[0.0, 0.0, 0.0]]), 0.0)


def test_translation_consistency(rng):
    pts = rng.uniform(0, 1, size=(300, 3))
    a = voxelize(PointCloud(pts), 0.02)
    b = voxelize(PointCloud(pts + np.array([5, -3, 7]) * 0.02), 0.02)
    # min-anchored origin: integer-voxel shifts leave coords and partition alone
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.point_to_voxel, b.point_to_voxel)


def test_devoxelize_broadcast():
    grid = voxelize(PointCloud([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [0.0, 0.001, 0.0]]), 0.02)
    assert grid.n_voxels == 1
    out = devoxelize(grid, Tensor([[3.0, 4.0]]))
    assert out.data.tolist() == [[3.0, 4.0]] * 3


def test_devoxelize_permutation_when_bijective():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    grid = voxelize(PointCloud(pts), 0.02)
    feats = np.arange(6.0).reshape(3, 2)
    out = devoxelize(grid, Tensor(feats)).data
    assert sorted(map(tuple, out)) == sorted(map(tuple, feats))
    assert np.array_equal(out, feats[grid.point_to_voxel])


def test_devoxelize_grad_counts(rng):
    pts = rng.uniform(0, 0.2, size=(50, 3))
    grid = voxelize(PointCloud(pts), 0.05)
    vf = Tensor(rng.normal(size=(grid.n_voxels, 4)), requires_grad=True)
    T.tsum(devoxelize(grid, vf)).backward()
    counts = np.bincount(grid.point_to_voxel, minlength=grid.n_voxels).astype(float)
    assert np.array_equal(vf.grad, np.tile(counts[:, None], (1, 4)))


def test_devoxelize_row_mismatch_errors():
    grid = voxelize(PointCloud([[0.0, 0.0, 0.0]]), 0.02)
    with pytest.raises(ValueError):
        devoxelize(grid, Tensor(np.zeros((2, 3))))


def test_devoxelize_then_reaverage_reproduces_voxel_features(rng):
    pts = rng.uniform(0, 0.3, size=(120, 3))
    grid = voxelize(PointCloud(pts), 0.04)
    vf = rng.normal(size=(grid.n_voxels, 5))
    per_point = devoxelize(grid, Tensor(vf)).data
    for v, members in enumerate(grid.voxel_to_points):
        # the broadcast is lossless: every member row is the voxel row
        assert np.array_equal(per_point[members], np.tile(vf[v], (len(members), 1)))
        # re-averaging identical rows differs from them by at most summation ulps
        assert np.allclose(per_point[members].mean(axis=0), vf[v], rtol=1e-15, atol=0)


def test_positional_encoding_zero_vector():
    for levels in (1, 4, 10):
        pe = positional_encoding([0.0, 0.0, 0.0], levels)
        assert pe.shape == (6 * levels,)
        assert np.array_equal(pe[0::2], np.zeros(3 * levels))
        assert np.array_equal(pe[1::2], np.ones(3 * levels))


def test_positional_encoding_hand_value():
    pe = positional_encoding([1.0, 0.0, 0.0], 1)
    assert abs(pe[0] - np.sin(np.pi)) < 1e-15
    assert pe[1] == -1.0  # cos(pi)
    assert pe[2] == 0.0 and pe[3] == 1.0


def test_positional_encoding_bounded(rng):
    for _ in range(20):
        pe = positional_encoding(rng.uniform(-10, 10, 3), 6)
        assert np.all(pe >= -1.0) and np.all(pe <= 1.0)


def test_fuse_zero_projection_is_identity(rng):
    n, d, levels = 7, 5, 2
    f = Tensor(rng.normal(size=(n, d)))
    offs = Tensor(rng.normal(size=(n, 3)))
    w = Parameter("w", np.zeros((6 * levels, d)))
    b = Parameter("b", np.zeros(d))
    out = fuse_centroid_features(f, rng.normal(size=(n, 3)), offs, w, b)
    assert np.array_equal(out.data, f.data)


def test_fuse_zero_offsets_depends_only_on_positions(rng):
    n, d, levels = 5, 4, 3
    pos = rng.normal(size=(n, 3))
    f = Tensor(np.zeros((n, d)))
    w = Parameter("w", rng.normal(size=(6 * levels, d)))
    b = Parameter("b", np.zeros(d))
    out = fuse_centroid_features(f, pos, Tensor(np.zeros((n, 3))), w, b)
    expected = np.stack([positional_encoding(p, levels) for p in pos]) @ w.data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_fuse_grad_through_offsets(rng):
    n, d, levels = 6, 4, 2
    pos = rng.normal(size=(n, 3))
    f = Tensor(rng.normal(size=(n, d)))
    w = Parameter("w", rng.normal(size=(6 * levels, d)) * 0.3)
    b = Parameter("b", rng.normal(size=d) * 0.1)
    offs = Tensor(rng.normal(size=(n, 3)), requires_grad=True)
    err = grad_check(lambda o: T.tsum(fuse_centroid_features(f, pos, o, w, b) * 0.7), offs, eps=1e-6)
    assert err < 1e-5


def test_densify_instance_ids():
    assert densify_instance_ids(np.array([3, 7, 7])).tolist() == [0, 1, 1]
    assert densify_instance_ids(np.array([-1, 5, -1, 2])).tolist() == [-1, 1, -1, 0]


def test_pointcloud_invariants():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud([[np.inf, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], gt_semantic=np.array([-1]), gt_instance=np.array([0]))


def test_instances_from_cloud_centroids():
    pos = np.array([[0.0, 0, 0], [2.0, 4.0, 0], [9.0, 9.0, 9.0]])
    cloud = PointCloud(pos, None, np.array([1, 1, -1]), np.array([0, 0, -1]))
    (inst,) = instances_from_cloud(cloud)
    assert inst.mask.tolist() == [True, True, False]
    assert np.array_equal(inst.centroid, [1.0, 2.0, 0.0])
    assert inst.semantic_class == 1

import numpy as np
import pytest

from osis import tensor as T
from osis.backbone import (
    CENTER_TAP,
    OFFSETS,
    Backbone,
    VoxelScale,
    backbone_forward,
    make_conv_layer,
    prepare_scene,
    sparse_resample,
    submanifold_conv,
)
from osis.geometry import PointCloud
from osis.tensor import Tensor, grad_check
from conftest import tiny_scene


def _scale(coords):
    return VoxelScale(np.asarray(coords, dtype=np.int64))


def _identity_layer(c, rng=None):
    layer = make_conv_layer(np.random.default_rng(0), "t", c, c, "submanifold")
    layer.kernel.data[...] = 0.0
    layer.kernel.data[CENTER_TAP] = np.eye(c)
    layer.bias.data[...] = 0.0
    return layer


def test_isolated_voxel_center_tap_identity(rng):
    scale = _scale([[5, 5, 5]])
    layer = _identity_layer(3)
    layer.bias.data[...] = [1.0, 2.0, 3.0]
    x = rng.normal(size=(1, 3))
    out = submanifold_conv(scale, Tensor(x), layer)
    assert np.allclose(out.data, x + [1.0, 2.0, 3.0], atol=1e-15)


def test_all_zero_input_gives_bias_rows(rng):
    scale = _scale([[0, 0, 0], [0, 0, 1], [4, 4, 4]])
    layer = make_conv_layer(rng, "t", 4, 5, "submanifold")
    layer.bias.data[...] = rng.normal(size=5)
    out = submanifold_conv(scale, Tensor(np.zeros((3, 4))), layer)
    assert np.allclose(out.data, np.tile(layer.bias.data, (3, 1)), atol=1e-15)


def _dense_conv_oracle(coords, x, kernel, bias):
    """Direct per-site accumulation over the 27 taps."""
    index = {tuple(c): i for i, c in enumerate(coords)}
    out = np.tile(bias, (len(coords), 1))
    for v, c in enumerate(coords):
        for o, off in enumerate(OFFSETS):
            nb = index.get(tuple(c + off))
            if nb is not None:
                out[v] += x[nb] @ kernel[o]
    return out


def test_dense_block_matches_dense_oracle(rng):
    coords = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)])
    scale = _scale(coords)
    layer = make_conv_layer(rng, "t", 4, 6, "submanifold")
    x = rng.normal(size=(27, 4))
    out = submanifold_conv(scale, Tensor(x), layer).data
    want = _dense_conv_oracle(scale.coords, x, layer.kernel.data, layer.bias.data)
    assert np.allclose(out, want, atol=1e-12)


def test_random_occupancy_matches_dense_oracle(rng):
    coords = np.unique(rng.integers(0, 6, size=(60, 3)), axis=0)
    scale = _scale(coords)
    layer = make_conv_layer(rng, "t", 3, 3, "submanifold")
    x = rng.normal(size=(scale.n_sites, 3))
    out = submanifold_conv(scale, Tensor(x), layer).data
    want = _dense_conv_oracle(scale.coords, x, layer.kernel.data, layer.bias.data)
    assert np.allclose(out, want, atol=1e-12)


def test_submanifold_preserves_occupancy(rng):
    coords = np.unique(rng.integers(0, 8, size=(40, 3)), axis=0)
    scale = _scale(coords)
    layer = make_conv_layer(rng, "t", 2, 2, "submanifold")
    out = submanifold_conv(scale, Tensor(rng.normal(size=(scale.n_sites, 2))), layer)
    assert out.shape[0] == scale.n_sites


def test_conv_grad(rng):
    coords = np.unique(rng.integers(0, 4, size=(20, 3)), axis=0)
    scale = _scale(coords)
    layer = make_conv_layer(rng, "t", 3, 2, "submanifold")
    x = Tensor(rng.normal(size=(scale.n_sites, 3)), requires_grad=True)
    err = grad_check(lambda t: T.tsum(T.relu(submanifold_conv(scale, t, layer))), x, eps=1e-6)
    assert err < 1e-6
    fixed = Tensor(rng.normal(size=(scale.n_sites, 3)))
    err_k = grad_check(
        lambda t: T.tsum(submanifold_conv(scale, fixed, layer)),
        layer.kernel.tensor,
        eps=1e-6,
    )
    assert err_k < 1e-6


def test_downsample_cube_to_one_voxel(rng):
    coords = np.array([[i, j, k] for i in range(2) for j in range(2) for k in range(2)])
    scale = _scale(coords)
    layer = make_conv_layer(rng, "t", 2, 3, "strided-down")
    parent, out = sparse_resample(scale, Tensor(rng.normal(size=(8, 2))), layer)
    assert parent.n_sites == 1
    assert parent.coords.tolist() == [[0, 0, 0]]
    assert out.shape == (1, 3)


def test_down_then_up_occupancy_roundtrip(rng):
    coords = np.unique(rng.integers(0, 10, size=(50, 3)), axis=0)
    scale = _scale(coords)
    down = make_conv_layer(rng, "d", 2, 4, "strided-down")
    up = make_conv_layer(rng, "u", 4, 2, "transposed-up")
    parent, mid = sparse_resample(scale, Tensor(rng.normal(size=(scale.n_sites, 2))), down)
    fine, out = sparse_resample(parent, mid, up, target=scale)
    assert fine is scale
    assert out.shape == (scale.n_sites, 2)


def test_upsample_without_target_errors(rng):
    scale = _scale([[0, 0, 0]])
    up = make_conv_layer(rng, "u", 2, 2, "transposed-up")
    with pytest.raises(ValueError, match="recorded"):
        sparse_resample(scale, Tensor(np.zeros((1, 2))), up)


def test_parent_set_matches_floor_div_oracle(rng):
    coords = np.unique(rng.integers(0, 12, size=(50, 3)), axis=0)
    scale = _scale(coords)
    parent, _ = scale.downsampled()
    oracle = {tuple(c // 2) for c in coords}
    assert {tuple(c) for c in parent.coords} == oracle


def test_transposed_up_matches_oracle(rng):
    coords = np.unique(rng.integers(0, 6, size=(30, 3)), axis=0)
    scale = _scale(coords)
    parent, _ = scale.downsampled()
    up = make_conv_layer(rng, "u", 3, 2, "transposed-up")
    x = rng.normal(size=(parent.n_sites, 3))
    _, out = sparse_resample(parent, Tensor(x), up, target=scale)
    pindex = {tuple(c): i for i, c in enumerate(parent.coords)}
    want = np.tile(up.bias.data, (scale.n_sites, 1))
    for v, c in enumerate(scale.coords):
        for o, off in enumerate(OFFSETS):
            q = c - off
            if np.all(q >= 0) and np.all(q % 2 == 0):
                p = pindex.get(tuple(q // 2))
                if p is not None:
                    want[v] += x[p] @ up.kernel.data[o]
    assert np.allclose(out.data, want, atol=1e-12)


def test_backbone_single_point_shapes(rng):
    cloud = PointCloud([[0.1, 0.2, 0.3]], [[0.5, 0.5, 0.5]])
    backbone = Backbone(rng, levels=2, channels=[4, 8, 16], d=6, k=5, c=3)
    out = backbone_forward(cloud, backbone, voxel_size=0.05)
    assert out.offsets.shape == (1, 3)
    assert out.point_features.shape == (1, 6)
    assert out.mask_logits.shape == (1, 5)
    assert out.semantic_logits.shape == (1, 3)


def test_backbone_deterministic():
    cloud = tiny_scene(3)
    backbone = Backbone(np.random.default_rng(1), 2, [4, 8, 16], 6, 5, 3)
    a = backbone_forward(cloud, backbone, 0.05)
    b = backbone_forward(cloud, backbone, 0.05)
    for x, y in ((a.offsets, b.offsets), (a.mask_logits, b.mask_logits)):
        assert np.array_equal(x.data, y.data)


def test_backbone_mid_kernel_grad():
    cloud = tiny_scene(5, n=40)
    backbone = Backbone(np.random.default_rng(2), 1, [4, 8], 6, 5, 3)
    prep = prepare_scene(cloud, 0.06)

    def f(_):
        out = backbone_forward(cloud, backbone, 0.06)
        return (
            T.tsum(out.offsets)
            + T.tsum(out.point_features)
            + T.tsum(out.mask_logits)
            + T.tsum(out.semantic_logits)
        )

    kernel = backbone.unet.down[0].kernel
    kernel.tensor.zero_grad()
    f(None).backward()
    mag = np.abs(kernel.grad).ravel()
    coords = np.argsort(mag)[-8:]  # probe where there is signal
    err = grad_check(f, kernel.tensor, eps=1e-6, coords=coords)
    assert err < 1e-4


def test_permuting_points_permutes_outputs(rng):
    cloud = tiny_scene(7, n=50)
    perm = rng.permutation(cloud.n_points)
    permuted = PointCloud(
        cloud.positions[perm], cloud.colors[perm], cloud.gt_semantic[perm], cloud.gt_instance[perm]
    )
    backbone = Backbone(np.random.default_rng(4), 2, [4, 8, 16], 6, 5, 3)
    a = backbone_forward(cloud, backbone, 0.05)
    b = backbone_forward(permuted, backbone, 0.05)
    # per-voxel means sum members in input order: equality holds to fp noise
    assert np.allclose(b.offsets.data, a.offsets.data[perm], atol=1e-9)
    assert np.allclose(b.mask_logits.data, a.mask_logits.data[perm], atol=1e-9)
    assert np.allclose(b.semantic_logits.data, a.semantic_logits.data[perm], atol=1e-9)


def test_receptive_field_locality(rng):
    # two sites farther apart than the stacked reach stay independent
    scale = _scale([[0, 0, 0], [6, 0, 0]])
    layers = [make_conv_layer(rng, f"l{i}", 3, 3, "submanifold") for i in range(3)]
    x = rng.normal(size=(2, 3))

    def run(inp):
        h = Tensor(inp)
        for layer in layers:
            h = submanifold_conv(scale, h, layer)
        return h.data

    base = run(x)
    moved = x.copy()
    moved[1] += 100.0  # perturb the far site's features
    after = run(moved)
    assert np.array_equal(base[0], after[0])
    assert not np.array_equal(base[1], after[1])

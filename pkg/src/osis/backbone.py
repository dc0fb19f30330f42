"""Sparse voxel U-Net over occupied sites, plus the four per-point heads.

Convolutions are gather+GEMM: per scale a (sites x 27) neighbor table maps
each voxel to its 3x3x3 neighborhood (-1 where unoccupied), built once per
grid via packed-key binary search and cached on the scale object.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import PointCloud, SparseVoxelGrid, pack_coords, voxelize, devoxelize
from .tensor import Parameter, Tensor

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_TAP = 13  # index of (0,0,0) in OFFSETS


def _lookup(sorted_keys: np.ndarray, queries: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Rows of sorted_keys matching queries; -1 where invalid or missing."""
    out = np.full(queries.shape[0], -1, dtype=np.int64)
    if valid.any():
        q = pack_coords(queries[valid])
        pos = np.searchsorted(sorted_keys, q)
        pos[pos >= sorted_keys.size] = sorted_keys.size - 1 if sorted_keys.size else 0
        hit = sorted_keys.size > 0
        hits = (sorted_keys[pos] == q) if hit else np.zeros(q.size, bool)
        idx = np.flatnonzero(valid)
        out[idx[hits]] = pos[hits]
    return out


class Rulebook:
    """Per kernel tap, the valid (src row, dst row) index pairs.

    Missing neighbors simply have no pair; within one tap the dst (and src)
    indices are unique, so scatter updates are collision-free.
    """

    def __init__(self, table: np.ndarray, n_out: int):
        self.n_out = n_out
        self.pairs: list[tuple[np.ndarray, np.ndarray]] = []
        for o in range(27):
            dst = np.flatnonzero(table[:, o] >= 0)
            self.pairs.append((table[dst, o], dst))


class VoxelScale:
    """Occupancy at one resolution: unique sorted coords + cached rulebooks."""

    def __init__(self, coords: np.ndarray):
        self.coords = np.asarray(coords, dtype=np.int64)
        self.keys = pack_coords(self.coords)
        self._subm: np.ndarray | None = None
        self._subm_rules: Rulebook | None = None
        self._down: tuple["VoxelScale", np.ndarray] | None = None
        self._down_rules: Rulebook | None = None
        self._up: dict[int, np.ndarray] = {}
        self._up_rules: dict[int, Rulebook] = {}

    @property
    def n_sites(self) -> int:
        return self.coords.shape[0]

    def submanifold_table(self) -> np.ndarray:
        if self._subm is None:
            n = self.n_sites
            table = np.empty((n, 27), dtype=np.int64)
            for o, off in enumerate(OFFSETS):
                q = self.coords + off
                table[:, o] = _lookup(self.keys, q, (q >= 0).all(axis=1))
            self._subm = table
        return self._subm

    def submanifold_rules(self) -> Rulebook:
        if self._subm_rules is None:
            self._subm_rules = Rulebook(self.submanifold_table(), self.n_sites)
        return self._subm_rules

    def downsampled(self) -> tuple["VoxelScale", np.ndarray]:
        """Parent scale (coords // 2) and its (parents x 27) child table.

        Parent P gathers children at 2P + offset, the stride-2 form of the
        3x3x3 kernel.
        """
        if self._down is None:
            parents = np.unique(pack_coords(self.coords // 2))
            from .geometry import unpack_coords

            parent_scale = VoxelScale(unpack_coords(parents))
            n = parent_scale.n_sites
            table = np.empty((n, 27), dtype=np.int64)
            for o, off in enumerate(OFFSETS):
                q = 2 * parent_scale.coords + off
                table[:, o] = _lookup(self.keys, q, (q >= 0).all(axis=1))
            self._down = (parent_scale, table)
        return self._down

    def down_rules(self) -> tuple["VoxelScale", Rulebook]:
        parent, table = self.downsampled()
        if self._down_rules is None:
            self._down_rules = Rulebook(table, parent.n_sites)
        return parent, self._down_rules

    def up_table(self, coarse: "VoxelScale") -> np.ndarray:
        """(fine sites x 27) table into coarse rows: the transposed stride-2 form.

        Fine site c receives kernel tap d from parent (c - d) / 2 whenever
        that division is exact and the parent is occupied.
        """
        key = id(coarse)
        if key not in self._up:
            n = self.n_sites
            table = np.empty((n, 27), dtype=np.int64)
            for o, off in enumerate(OFFSETS):
                q = self.coords - off
                exact = (q >= 0).all(axis=1) & (q % 2 == 0).all(axis=1)
                table[:, o] = _lookup(coarse.keys, q // 2, exact)
            self._up[key] = table
        return self._up[key]

    def up_rules(self, coarse: "VoxelScale") -> Rulebook:
        key = id(coarse)
        if key not in self._up_rules:
            self._up_rules[key] = Rulebook(self.up_table(coarse), self.n_sites)
        return self._up_rules[key]


@dataclass
class SparseConvLayer:
    """3x3x3 conv parameters; kernel stored (27, C_in, C_out), tap order OFFSETS."""

    kernel: Parameter
    bias: Parameter
    mode: str  # submanifold | strided-down | transposed-up

    @property
    def c_in(self) -> int:
        return self.kernel.data.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.data.shape[2]


def _conv_apply(x: Tensor, layer: SparseConvLayer, rules: Rulebook) -> Tensor:
    """out[dst] = bias + sum_taps kernel[tap] . x[src], over the valid pairs
    of each tap; sites with no valid tap still receive the bias."""
    kt, bt = layer.kernel.tensor, layer.bias.tensor
    cin, cout = layer.c_in, layer.c_out
    if x.shape[1] != cin:
        raise ValueError(f"conv: input width {x.shape[1]} vs kernel C_in {cin}")
    out_data = np.tile(bt.data, (rules.n_out, 1))
    for o, (src, dst) in enumerate(rules.pairs):
        if src.size:
            out_data[dst] += x.data[src] @ kt.data[o]

    def bw(out):
        def run():
            g = out.grad
            if bt.requires_grad:
                bt._accum(g.sum(axis=0))
            need_dx = x.requires_grad
            dx = np.zeros_like(x.data) if need_dx else None
            for o, (src, dst) in enumerate(rules.pairs):
                if not src.size:
                    continue
                g_dst = g[dst]
                if kt.requires_grad:
                    kt.grad[o] += x.data[src].T @ g_dst
                if need_dx:
                    # src indices are unique within one tap: += cannot collide
                    dx[src] += g_dst @ kt.data[o].T
            if need_dx:
                x._accum(dx)
        return run

    return T._make(out_data, [x, kt, bt], bw)


def submanifold_conv(scale: VoxelScale, x: Tensor, layer: SparseConvLayer) -> Tensor:
    """Convolve occupied sites only; output occupancy equals input occupancy."""
    if layer.mode != "submanifold":
        raise ValueError(f"submanifold_conv on layer of mode {layer.mode!r}")
    if x.shape[0] != scale.n_sites:
        raise ValueError(f"conv: {x.shape[0]} rows vs {scale.n_sites} sites")
    return _conv_apply(x, layer, scale.submanifold_rules())


def sparse_resample(
    scale: VoxelScale,
    x: Tensor,
    layer: SparseConvLayer,
    target: VoxelScale | None = None,
) -> tuple[VoxelScale, Tensor]:
    """Stride-2 resampling between scales.

    strided-down: output sites are the distinct parent voxels. transposed-up:
    features are scattered to ``target``, a previously recorded finer
    occupancy (required).
    """
    if layer.mode == "strided-down":
        parent, rules = scale.down_rules()
        return parent, _conv_apply(x, layer, rules)
    if layer.mode == "transposed-up":
        if target is None:
            raise ValueError("transposed-up requires a recorded finer occupancy")
        return target, _conv_apply(x, layer, target.up_rules(scale))
    raise ValueError(f"sparse_resample on layer of mode {layer.mode!r}")


# -- parameter construction ---------------------------------------------------


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def make_conv_layer(
    rng: np.random.Generator, name: str, c_in: int, c_out: int, mode: str
) -> SparseConvLayer:
    kernel = Parameter(
        f"{name}.kernel", _xavier(rng, (27, c_in, c_out), 27 * c_in, 27 * c_out)
    )
    bias = Parameter(f"{name}.bias", np.zeros(c_out))
    return SparseConvLayer(kernel=kernel, bias=bias, mode=mode)


class MLPHead:
    """Per-point two-layer head: affine -> relu -> affine."""

    def __init__(self, rng, name: str, c_in: int, hidden: int, c_out: int):
        self.w0 = Parameter(f"{name}.w0", _xavier(rng, (c_in, hidden), c_in, hidden))
        self.b0 = Parameter(f"{name}.b0", np.zeros(hidden))
        self.w1 = Parameter(f"{name}.w1", _xavier(rng, (hidden, c_out), hidden, c_out))
        self.b1 = Parameter(f"{name}.b1", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(T.relu(T.affine(x, self.w0, self.b0)), self.w1, self.b1)

    def parameters(self) -> list[Parameter]:
        return [self.w0, self.b0, self.w1, self.b1]


class UNet:
    """Encoder/decoder over voxel scales with additive skip connections."""

    def __init__(self, rng, c_in: int, levels: int, channels: list[int]):
        if len(channels) != levels + 1:
            raise ValueError(f"need {levels + 1} channel widths, got {len(channels)}")
        self.levels = levels
        self.channels = channels
        self.stem = make_conv_layer(rng, "unet.stem", c_in, channels[0], "submanifold")
        self.enc = []
        self.down = []
        for i in range(levels):
            self.enc.append(
                [
                    make_conv_layer(rng, f"unet.enc{i}.conv{j}", channels[i], channels[i], "submanifold")
                    for j in range(2)
                ]
            )
            self.down.append(
                make_conv_layer(rng, f"unet.down{i}", channels[i], channels[i + 1], "strided-down")
            )
        self.bottom = [
            make_conv_layer(rng, f"unet.bottom.conv{j}", channels[-1], channels[-1], "submanifold")
            for j in range(2)
        ]
        self.up = []
        self.dec = []
        for i in reversed(range(levels)):
            self.up.append(
                make_conv_layer(rng, f"unet.up{i}", channels[i + 1], channels[i], "transposed-up")
            )
            self.dec.append(
                [
                    make_conv_layer(rng, f"unet.dec{i}.conv{j}", channels[i], channels[i], "submanifold")
                    for j in range(2)
                ]
            )

    def __call__(self, scale: VoxelScale, x: Tensor) -> Tensor:
        x = T.relu(submanifold_conv(scale, x, self.stem))
        scales = [scale]
        skips = []
        for i in range(self.levels):
            for conv in self.enc[i]:
                x = T.relu(submanifold_conv(scales[-1], x, conv))
            skips.append(x)
            coarser, x = sparse_resample(scales[-1], x, self.down[i])
            x = T.relu(x)
            scales.append(coarser)
        for conv in self.bottom:
            x = T.relu(submanifold_conv(scales[-1], x, conv))
        for step, i in enumerate(reversed(range(self.levels))):
            finer, x = sparse_resample(scales[i + 1], x, self.up[step], target=scales[i])
            x = T.relu(x) + skips[i]
            for conv in self.dec[step]:
                x = T.relu(submanifold_conv(scales[i], x, conv))
        return x

    def parameters(self) -> list[Parameter]:
        out = [self.stem.kernel, self.stem.bias]
        for i in range(self.levels):
            for conv in self.enc[i]:
                out += [conv.kernel, conv.bias]
            out += [self.down[i].kernel, self.down[i].bias]
        for conv in self.bottom:
            out += [conv.kernel, conv.bias]
        for step in range(self.levels):
            out += [self.up[step].kernel, self.up[step].bias]
            for conv in self.dec[step]:
                out += [conv.kernel, conv.bias]
        return out


@dataclass
class BackboneOutput:
    """The four per-point branches."""

    offsets: Tensor          # (N, 3) meters
    point_features: Tensor   # (N, d)
    mask_logits: Tensor      # (N, k) initial instance masks
    semantic_logits: Tensor  # (N, c)


class Backbone:
    VOXEL_FEATURE_DIM = 6  # color (3) + in-voxel normalized position (3)

    def __init__(self, rng, levels: int, channels: list[int], d: int, k: int, c: int):
        self.unet = UNet(rng, self.VOXEL_FEATURE_DIM, levels, channels)
        width = channels[0]
        self.offset_head = MLPHead(rng, "heads.offset", width, d, 3)
        self.feature_head = MLPHead(rng, "heads.feature", width, d, d)
        self.mask_head = MLPHead(rng, "heads.mask", width, d, k)
        self.semantic_head = MLPHead(rng, "heads.semantic", width, d, c)

    def parameters(self) -> list[Parameter]:
        out = self.unet.parameters()
        for head in (self.offset_head, self.feature_head, self.mask_head, self.semantic_head):
            out += head.parameters()
        return out


@dataclass
class PreparedScene:
    """A voxelized cloud plus its cached scale (reused across training steps)."""

    cloud: PointCloud
    grid: SparseVoxelGrid
    scale: VoxelScale


def prepare_scene(cloud: PointCloud, voxel_size: float) -> PreparedScene:
    grid = voxelize(cloud, voxel_size)
    return PreparedScene(cloud=cloud, grid=grid, scale=VoxelScale(grid.coords))


def backbone_apply(prep: PreparedScene, backbone: Backbone) -> BackboneOutput:
    voxel_feats = backbone.unet(prep.scale, Tensor(prep.grid.features))
    point_feats = devoxelize(prep.grid, voxel_feats)
    return BackboneOutput(
        offsets=backbone.offset_head(point_feats),
        point_features=backbone.feature_head(point_feats),
        mask_logits=backbone.mask_head(point_feats),
        semantic_logits=backbone.semantic_head(point_feats),
    )


def backbone_forward(cloud: PointCloud, backbone: Backbone, voxel_size: float) -> BackboneOutput:
    """Voxelize, run the U-Net, devoxelize, and apply the four heads."""
    return backbone_apply(prepare_scene(cloud, voxel_size), backbone)

"""Point-cloud containers, voxelization, and centroid-aware feature fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .tensor import Tensor

# 21 bits per axis packed into one int64 key; plenty for desk-scale scenes.
_AXIS_BITS = 21
_AXIS_CAP = 1 << _AXIS_BITS


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Bijective (x,y,z) -> int64 key; key order == lexicographic coord order."""
    if coords.size and (coords.min() < 0 or coords.max() >= _AXIS_CAP):
        raise ValueError("voxel coords out of packable range")
    c = coords.astype(np.int64)
    return (c[:, 0] << (2 * _AXIS_BITS)) | (c[:, 1] << _AXIS_BITS) | c[:, 2]


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    mask = _AXIS_CAP - 1
    return np.stack(
        [(keys >> (2 * _AXIS_BITS)) & mask, (keys >> _AXIS_BITS) & mask, keys & mask],
        axis=1,
    ).astype(np.int64)


@dataclass
class PointCloud:
    """N points with positions (meters), optional colors and ground truth.

    Instance ids are dense 0..G-1 (-1 for points outside any instance);
    any point with an instance id also carries a semantic label.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    gt_semantic: np.ndarray | None = None
    gt_instance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N,3), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        n = self.positions.shape[0]
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise ValueError(f"colors must be (N,3), got {self.colors.shape}")
        if (self.gt_semantic is None) != (self.gt_instance is None):
            raise ValueError("gt_semantic and gt_instance must be provided together")
        if self.gt_semantic is not None:
            self.gt_semantic = np.asarray(self.gt_semantic, dtype=np.int64)
            self.gt_instance = np.asarray(self.gt_instance, dtype=np.int64)
            if self.gt_semantic.shape != (n,) or self.gt_instance.shape != (n,):
                raise ValueError("ground-truth arrays must have length N")
            if np.any((self.gt_instance >= 0) & (self.gt_semantic < 0)):
                raise ValueError("points with an instance id must carry a semantic label")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_semantic is not None


def densify_instance_ids(ids: np.ndarray) -> np.ndarray:
    """Relabel non-negative instance ids to dense 0..G-1 (order of sorted ids)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.full_like(ids, -1)
    pos = ids >= 0
    if pos.any():
        uniq, inv = np.unique(ids[pos], return_inverse=True)
        out[pos] = inv
    return out


@dataclass
class GroundTruthInstance:
    """One annotated instance: binary membership mask, class, centroid."""

    mask: np.ndarray
    semantic_class: int
    centroid: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        if not self.mask.any():
            raise ValueError("instance mask must be nonempty")


def instances_from_cloud(cloud: PointCloud) -> list[GroundTruthInstance]:
    if not cloud.has_ground_truth:
        raise ValueError("cloud carries no ground truth")
    out = []
    n_inst = int(cloud.gt_instance.max()) + 1 if (cloud.gt_instance >= 0).any() else 0
    for g in range(n_inst):
        mask = cloud.gt_instance == g
        classes = np.unique(cloud.gt_semantic[mask])
        if classes.size != 1:
            raise ValueError(f"instance {g} spans multiple semantic classes {classes}")
        out.append(
            GroundTruthInstance(
                mask=mask,
                semantic_class=int(classes[0]),
                centroid=cloud.positions[mask].mean(axis=0),
            )
        )
    return out


def offset_targets(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """(foreground indices, centroid - position) for every instance point."""
    fg = np.flatnonzero(cloud.gt_instance >= 0)
    if fg.size == 0:
        return fg, np.zeros((0, 3))
    centroids = np.zeros((int(cloud.gt_instance.max()) + 1, 3))
    for g in range(centroids.shape[0]):
        members = cloud.gt_instance == g
        centroids[g] = cloud.positions[members].mean(axis=0)
    return fg, centroids[cloud.gt_instance[fg]] - cloud.positions[fg]


@dataclass
class SparseVoxelGrid:
    """Occupied voxels with per-voxel features and point<->voxel maps.

    coords are unique and lexicographically sorted; every voxel owns at
    least one point; voxel index of point i is point_to_voxel[i].
    """

    voxel_size: float
    origin: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    point_to_voxel: np.ndarray
    point_order: np.ndarray = field(repr=False)   # points sorted by voxel
    voxel_starts: np.ndarray = field(repr=False)  # segment bounds into point_order

    @property
    def n_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.point_to_voxel.shape[0]

    @cached_property
    def voxel_to_points(self) -> list[np.ndarray]:
        return [
            self.point_order[self.voxel_starts[v] : self.voxel_starts[v + 1]]
            for v in range(self.n_voxels)
        ]


def voxelize(cloud: PointCloud, voxel_size: float) -> SparseVoxelGrid:
    """Partition points into voxels of the given edge length.

    Per-voxel feature is the mean over member points of
    [color (zeros when absent), (position - voxel center) / voxel_size].
    Voxels are ordered lexicographically by integer coords.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if not np.all(np.isfinite(cloud.positions)):
        raise ValueError("non-finite positions")
    origin = cloud.positions.min(axis=0)
    ijk = np.floor((cloud.positions - origin) / voxel_size).astype(np.int64)
    keys = pack_coords(ijk)
    uniq, inverse = np.unique(keys, return_inverse=True)
    coords = unpack_coords(uniq)

    colors = cloud.colors if cloud.colors is not None else np.zeros_like(cloud.positions)
    centers = origin + (ijk + 0.5) * voxel_size
    per_point = np.concatenate(
        [colors, (cloud.positions - centers) / voxel_size], axis=1
    )

    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(uniq.size + 1))
    sums = np.add.reduceat(per_point[order], starts[:-1], axis=0)
    counts = np.diff(starts)
    features = sums / counts[:, None]

    return SparseVoxelGrid(
        voxel_size=float(voxel_size),
        origin=origin,
        coords=coords,
        features=features,
        point_to_voxel=inverse.astype(np.int64),
        point_order=order,
        voxel_starts=starts,
    )


def devoxelize(grid: SparseVoxelGrid, voxel_features: Tensor) -> Tensor:
    """Broadcast voxel rows back to points (nearest-voxel gather).

    Differentiable: the backward pass scatter-adds per-voxel over member
    points via a precomputed segment reduction.
    """
    vf = voxel_features
    if vf.shape[0] != grid.n_voxels:
        raise ValueError(
            f"devoxelize: {vf.shape[0]} feature rows vs {grid.n_voxels} voxels"
        )
    order, starts = grid.point_order, grid.voxel_starts

    def bw(out):
        def run():
            if vf.requires_grad:
                vf._accum(np.add.reduceat(out.grad[order], starts[:-1], axis=0))
        return run

    return T._make(vf.data[grid.point_to_voxel], [vf], bw)


def positional_encoding(x, levels: int) -> np.ndarray:
    """Fourier features of a 3-vector: per axis a (major) and level l (minor),
    sin(2^l * pi * x_a) then cos(2^l * pi * x_a); length 6*levels, all in [-1,1]."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(3)
    out = np.empty(6 * levels)
    for a in range(3):
        for l in range(levels):
            arg = (2.0**l) * np.pi * x[a]
            out[2 * (a * levels + l)] = np.sin(arg)
            out[2 * (a * levels + l) + 1] = np.cos(arg)
    return out


def encode_positions(points: Tensor, levels: int) -> Tensor:
    """Tape version of positional_encoding over (N,3) rows, same layout."""
    col_axis = np.repeat(np.arange(3), levels)
    factors = np.tile((2.0 ** np.arange(levels)) * np.pi, 3)
    scaled = T.scale_columns(T.gather_cols(points, col_axis), factors)
    return T.sincos_interleave(scaled)


def fuse_centroid_features(
    f_origin: Tensor,
    positions: np.ndarray,
    offsets: Tensor,
    proj_weight,
    proj_bias,
) -> Tensor:
    """Add a learned projection of the encoded predicted centroid to each row.

    Centroid estimate is position + offset; encoding uses levels inferred
    from the projection input width (6*levels). Gradients flow through
    f_origin, offsets, and the projection.
    """
    w = proj_weight.tensor if hasattr(proj_weight, "tensor") else proj_weight
    if w.shape[0] % 6 != 0:
        raise ValueError(f"projection input width {w.shape[0]} is not 6*levels")
    levels = w.shape[0] // 6
    if f_origin.shape[0] != offsets.shape[0] or offsets.shape[1] != 3:
        raise ValueError(
            f"fuse: shape mismatch features {f_origin.shape} vs offsets {offsets.shape}"
        )
    centroid = offsets + np.asarray(positions, dtype=np.float64)
    pe = encode_positions(centroid, levels)
    return f_origin + T.affine(pe, proj_weight, proj_bias)

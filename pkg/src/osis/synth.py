"""Synthetic desk-scale scenes: floor + walls, surface-sampled instances.

Shapes include split_pair, an instance made of two disconnected clusters
sharing one instance id, which probes whether single predictions can cover
non-connected objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

FLOOR_CLASS = 0
WALL_CLASS = 1
SHAPE_CLASSES = {"box": 2, "sphere": 3, "cylinder": 4, "l_shape": 5, "split_pair": 6}
DEFAULT_SHAPES = ("box", "sphere", "cylinder", "l_shape", "split_pair")


class SynthesisError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    n_instances: tuple[int, int] = (3, 6)
    points_per_instance: tuple[int, int] = (150, 400)
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    noise_sigma: float = 0.005
    background_density: float = 250.0  # points per square meter
    extent: float = 3.0
    n_classes: int = 8
    seed: int = 0
    wall_height: float = 0.8

    def __post_init__(self):
        if self.n_instances[0] < 1 or self.n_instances[0] > self.n_instances[1]:
            raise ValueError("n_instances range must be nonempty")
        if self.points_per_instance[0] < 8 or self.points_per_instance[0] > self.points_per_instance[1]:
            raise ValueError("points_per_instance range must be nonempty")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        unknown = set(self.shapes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")


def _sample_box(rng, half, n):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_sphere(rng, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_cylinder(rng, radius, height, n):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    rr = radius * np.sqrt(rng.uniform(0, 1, n))
    pts = np.empty((n, 3))
    on_side = which == 0
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-height / 2, height / 2, on_side.sum())
    for w, z in ((1, height / 2), (2, -height / 2)):
        m = which == w
        pts[m, 0] = rr[m] * np.cos(theta[m])
        pts[m, 1] = rr[m] * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _sample_instance(rng, shape, n):
    """Points in the instance's local frame (resting height included) plus
    its horizontal footprint radius."""
    if shape == "box":
        half = rng.uniform((0.08, 0.08, 0.08), (0.22, 0.22, 0.22))
        pts = _sample_box(rng, half, n) + [0, 0, half[2]]
        radius = float(np.hypot(half[0], half[1]))
    elif shape == "sphere":
        r = rng.uniform(0.08, 0.2)
        pts = _sample_sphere(rng, r, n) + [0, 0, r]
        radius = r
    elif shape == "cylinder":
        r = rng.uniform(0.06, 0.15)
        h = rng.uniform(0.15, 0.4)
        pts = _sample_cylinder(rng, r, h, n) + [0, 0, h / 2]
        radius = r
    elif shape == "l_shape":
        a = rng.uniform((0.12, 0.05, 0.05), (0.25, 0.08, 0.12))
        b = rng.uniform((0.05, 0.12, 0.05), (0.08, 0.25, 0.12))
        na = int(n * a.prod() ** (1 / 3) / (a.prod() ** (1 / 3) + b.prod() ** (1 / 3)))
        arm_a = _sample_box(rng, a, max(na, 4)) + [a[0], 0, a[2]]
        arm_b = _sample_box(rng, b, max(n - na, 4)) + [0, b[1], b[2]]
        pts = np.concatenate([arm_a, arm_b])
        shift = np.array([a[0], b[1], 0.0])  # recenter the corner-anchored L
        pts -= shift
        radius = float(np.hypot(a[0], b[1]) + max(a[1], b[0]))
    elif shape == "split_pair":
        he = rng.uniform(0.06, 0.1)
        gap = rng.uniform(0.18, 0.3)
        offset = he * 2 + gap
        direction = rng.uniform(0, 2 * np.pi)
        dvec = np.array([np.cos(direction), np.sin(direction), 0.0])
        n1 = n // 2
        half = np.array([he, he, he])
        part1 = _sample_box(rng, half, max(n1, 4)) + [0, 0, he]
        part2 = _sample_box(rng, half, max(n - n1, 4)) + dvec * offset + [0, 0, he]
        pts = np.concatenate([part1, part2])
        radius = float(offset / 2 + he * 1.5)
        pts -= dvec * (offset / 2)  # center the pair on its placement point
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return pts, radius


def generate_scene(cfg: SynthConfig) -> PointCloud:
    """One seeded scene; identical config (incl. seed) gives identical bits."""
    rng = np.random.default_rng(cfg.seed)
    n_inst = int(rng.integers(cfg.n_instances[0], cfg.n_instances[1] + 1))

    placed: list[tuple[np.ndarray, float]] = []
    margin = min(0.45, cfg.extent * 0.18)
    lo_xy, hi_xy = margin, cfg.extent - margin
    if hi_xy <= lo_xy:
        raise SynthesisError(f"extent {cfg.extent} too small for placement")

    parts = []  # (points, semantic, instance)
    for idx in range(n_inst):
        shape = str(rng.choice(list(cfg.shapes)))
        n_pts = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
        pts, radius = _sample_instance(rng, shape, n_pts)
        center = None
        for _ in range(1000):
            cand = rng.uniform(lo_xy, hi_xy, size=2)
            if all(
                np.linalg.norm(cand - c[:2]) >= radius + r + 0.02 for c, r in placed
            ):
                center = np.array([cand[0], cand[1], 0.0])
                break
        if center is None:
            raise SynthesisError(
                f"could not place instance {idx} (radius {radius:.2f}) after 1000 tries"
            )
        placed.append((center, radius))
        parts.append((pts + center, SHAPE_CLASSES[shape], idx))

    # background: floor plane plus two walls
    n_floor = int(cfg.background_density * cfg.extent**2)
    floor = np.column_stack(
        [
            rng.uniform(0, cfg.extent, n_floor),
            rng.uniform(0, cfg.extent, n_floor),
            np.zeros(n_floor),
        ]
    )
    parts.append((floor, FLOOR_CLASS, -1))
    n_wall = int(cfg.background_density * cfg.extent * cfg.wall_height)
    for wall_axis in (0, 1):
        w = np.zeros((n_wall, 3))
        w[:, 1 - wall_axis] = rng.uniform(0, cfg.extent, n_wall)
        w[:, 2] = rng.uniform(0, cfg.wall_height, n_wall)
        parts.append((w, WALL_CLASS, -1))

    positions = np.concatenate([p for p, _, _ in parts])
    semantic = np.concatenate([np.full(len(p), s) for p, s, _ in parts])
    instance = np.concatenate([np.full(len(p), i) for p, _, i in parts])

    if cfg.noise_sigma > 0:
        positions = positions + rng.normal(0, cfg.noise_sigma, positions.shape)

    colors = np.empty_like(positions)
    colors[instance < 0] = 0.5
    for idx in range(n_inst):
        base = rng.uniform(0.2, 0.9, 3)
        colors[instance == idx] = base
    colors += rng.normal(0, 0.03, colors.shape)
    colors = np.clip(colors, 0.0, 1.0)

    perm = rng.permutation(len(positions))
    positions, colors = positions[perm], colors[perm]
    semantic, instance = semantic[perm], instance[perm]

    # snap to the storage grid so save/load round-trips are bit-exact
    positions = positions.astype(np.float32).astype(np.float64)
    colors = np.round(colors * 255.0) / 255.0

    return PointCloud(positions, colors, semantic.astype(np.int64), instance.astype(np.int64))


def generate_dataset(cfg: SynthConfig, count: int, base_seed: int | None = None) -> list[PointCloud]:
    base = cfg.seed if base_seed is None else base_seed
    out = []
    for i in range(count):
        scene_cfg = SynthConfig(**{**cfg.__dict__, "seed": base + i})
        out.append(generate_scene(scene_cfg))
    return out


# -- light augmentation (default off in training configs) ---------------------


def rotate_z(cloud: PointCloud, angle: float) -> PointCloud:
    c, s = np.cos(angle), np.sin(angle)
    center = cloud.positions.mean(axis=0)
    rel = cloud.positions - center
    rot = np.column_stack(
        [rel[:, 0] * c - rel[:, 1] * s, rel[:, 0] * s + rel[:, 1] * c, rel[:, 2]]
    )
    return PointCloud(rot + center, cloud.colors, cloud.gt_semantic, cloud.gt_instance)


def flip_x(cloud: PointCloud) -> PointCloud:
    p = cloud.positions.copy()
    p[:, 0] = p[:, 0].mean() * 2 - p[:, 0]
    return PointCloud(p, cloud.colors, cloud.gt_semantic, cloud.gt_instance)


def jitter(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    return PointCloud(
        cloud.positions + rng.normal(0, sigma, cloud.positions.shape),
        cloud.colors,
        cloud.gt_semantic,
        cloud.gt_instance,
    )


def augment(cloud: PointCloud, rng: np.random.Generator, jitter_sigma: float = 0.005) -> PointCloud:
    out = rotate_z(cloud, rng.uniform(0, 2 * np.pi))
    if rng.uniform() < 0.5:
        out = flip_x(out)
    if jitter_sigma > 0:
        out = jitter(out, jitter_sigma, rng)
    return out

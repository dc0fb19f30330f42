"""Scene files (native binary + PLY) and prediction dumps.

Native scene layout, little-endian: magic ``OSISSCN1``, N u64, positions
f32 x3, colors u8 x3, then optionally gt_semantic i32 and gt_instance i32
(presence inferred from file size). The scene_id is the file stem.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud, densify_instance_ids
from .inference import Prediction

SCENE_MAGIC = b"OSISSCN1"


class SceneIOError(Exception):
    pass


class MalformedHeaderError(SceneIOError):
    pass


class TruncatedPayloadError(SceneIOError):
    pass


class LengthMismatchError(SceneIOError):
    pass


def save_scene(cloud: PointCloud, path) -> None:
    path = Path(path)
    if path.suffix == ".ply":
        _save_ply(cloud, path)
        return
    n = cloud.n_points
    colors = cloud.colors if cloud.colors is not None else np.zeros((n, 3))
    try:
        with open(path, "wb") as fh:
            fh.write(SCENE_MAGIC)
            fh.write(struct.pack("<Q", n))
            fh.write(cloud.positions.astype("<f4").tobytes())
            fh.write(np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8).tobytes())
            if cloud.has_ground_truth:
                fh.write(cloud.gt_semantic.astype("<i4").tobytes())
                fh.write(cloud.gt_instance.astype("<i4").tobytes())
    except OSError as err:
        raise SceneIOError(f"cannot write scene {path}: {err}") from err


def load_scene(path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise SceneIOError(f"scene file not found: {path}")
    if path.suffix == ".ply":
        return _load_ply(path)
    raw = path.read_bytes()
    if raw[:8] != SCENE_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (n,) = struct.unpack_from("<Q", raw, 8)
    base = 16
    need_core = n * (12 + 3)
    if len(raw) < base + need_core:
        raise TruncatedPayloadError(f"{path}: expected {base + need_core} bytes, got {len(raw)}")
    positions = (
        np.frombuffer(raw, dtype="<f4", count=3 * n, offset=base)
        .reshape(n, 3)
        .astype(np.float64)
    )
    colors = (
        np.frombuffer(raw, dtype=np.uint8, count=3 * n, offset=base + 12 * n)
        .reshape(n, 3)
        .astype(np.float64)
        / 255.0
    )
    rest = len(raw) - base - need_core
    if rest == 0:
        return PointCloud(positions, colors)
    if rest != 8 * n:
        raise LengthMismatchError(f"{path}: {rest} trailing bytes do not form gt arrays")
    off = base + need_core
    sem = np.frombuffer(raw, dtype="<i4", count=n, offset=off).astype(np.int64)
    inst = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 4 * n).astype(np.int64)
    return PointCloud(positions, colors, sem, densify_instance_ids(inst))


def scene_id_of(path) -> str:
    return Path(path).stem


def list_scene_files(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise SceneIOError(f"data directory not found: {data_dir}")
    files = sorted(p for p in data_dir.iterdir() if p.suffix in (".osc", ".ply"))
    if not files:
        raise SceneIOError(f"no .osc/.ply scenes in {data_dir}")
    return files


# -- PLY ----------------------------------------------------------------------

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


def _load_ply(path: Path) -> PointCloud:
    raw = path.read_bytes()
    header_end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or header_end < 0:
        raise MalformedHeaderError(f"{path}: not a PLY file")
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[header_end + len(b"end_header\n") :]

    fmt = None
    n = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise MalformedHeaderError(f"{path}: unsupported format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) < 3:
                raise MalformedHeaderError(f"{path}: bad element line {line!r}")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3 or parts[1] not in _PLY_DTYPES:
                raise MalformedHeaderError(f"{path}: unsupported property {line!r}")
            props.append((parts[2], _PLY_DTYPES[parts[1]]))
    if fmt is None or n is None or not props:
        raise MalformedHeaderError(f"{path}: incomplete header")
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise MalformedHeaderError(f"{path}: missing vertex property {req!r}")

    if fmt == "binary_little_endian":
        dt = np.dtype([(name, typ) for name, typ in props])
        if len(body) < n * dt.itemsize:
            raise TruncatedPayloadError(
                f"{path}: need {n * dt.itemsize} payload bytes, got {len(body)}"
            )
        table = np.frombuffer(body, dtype=dt, count=n)
    else:
        lines = body.decode("ascii", errors="replace").splitlines()
        rows = [ln.split() for ln in lines if ln.strip()]
        if len(rows) < n:
            raise TruncatedPayloadError(f"{path}: need {n} vertex rows, got {len(rows)}")
        rows = rows[:n]
        if any(len(r) != len(props) for r in rows):
            raise LengthMismatchError(f"{path}: vertex row width != {len(props)}")
        table = {}
        cols = np.array(rows, dtype=np.float64)
        for i, (name, _typ) in enumerate(props):
            table[name] = cols[:, i]

    def col(name):
        return np.asarray(table[name], dtype=np.float64)

    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([col("red"), col("green"), col("blue")], axis=1) / 255.0
    sem = inst = None
    if "semantic_label" in names or "instance_id" in names:
        sem = (
            col("semantic_label").astype(np.int64)
            if "semantic_label" in names
            else np.full(n, -1, dtype=np.int64)
        )
        inst = (
            densify_instance_ids(col("instance_id").astype(np.int64))
            if "instance_id" in names
            else np.full(n, -1, dtype=np.int64)
        )
    return PointCloud(positions, colors, sem, inst)


def _save_ply(cloud: PointCloud, path: Path, override_colors: np.ndarray | None = None) -> None:
    n = cloud.n_points
    colors = override_colors if override_colors is not None else cloud.colors
    if colors is None:
        colors = np.full((n, 3), 0.5)
    with_gt = cloud.has_ground_truth and override_colors is None
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    if with_gt:
        lines += ["property int semantic_label", "property int instance_id"]
    lines.append("end_header")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if with_gt:
        fields += [("semantic_label", "<i4"), ("instance_id", "<i4")]
    rec = np.zeros(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb.T
    if with_gt:
        rec["semantic_label"] = cloud.gt_semantic.astype(np.int32)
        rec["instance_id"] = cloud.gt_instance.astype(np.int32)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def export_instances_ply(cloud: PointCloud, preds: list[Prediction], path) -> None:
    """Colored PLY: one color per predicted instance, grey for background."""
    rng = np.random.default_rng(0)
    colors = np.full((cloud.n_points, 3), 0.35)
    for p in preds:
        colors[p.mask] = rng.uniform(0.15, 0.95, size=3)
    _save_ply(cloud, Path(path), override_colors=colors)


# -- prediction dumps --------------------------------------------------------


def pack_mask(mask: np.ndarray) -> bytes:
    """LSB-first bit packing; trailing pad bits are zero."""
    return np.packbits(np.asarray(mask, dtype=np.uint8), bitorder="little").tobytes()


def unpack_mask(raw: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits.size < n:
        raise TruncatedPayloadError(f"mask holds {bits.size} bits, scene needs {n}")
    if bits[n:].any():
        raise LengthMismatchError("nonzero padding bits in mask file")
    return bits[:n].astype(bool)


def save_predictions(preds: list[Prediction], scene_id: str, out_dir) -> Path:
    """One JSON index per scene plus bit-packed mask files next to it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    instances = []
    for i, p in enumerate(preds):
        mask_file = f"{scene_id}_{i:03d}.mask"
        (out_dir / mask_file).write_bytes(pack_mask(p.mask))
        instances.append(
            {"class": int(p.semantic_class), "score": float(p.score), "mask_file": mask_file}
        )
    index = out_dir / f"{scene_id}.json"
    index.write_text(json.dumps({"scene_id": scene_id, "instances": instances}, indent=1))
    return index


def load_predictions(index_path, n_points: int) -> list[Prediction]:
    index_path = Path(index_path)
    if not index_path.exists():
        raise SceneIOError(f"prediction index not found: {index_path}")
    doc = json.loads(index_path.read_text())
    out = []
    for item in doc["instances"]:
        raw = (index_path.parent / item["mask_file"]).read_bytes()
        out.append(
            Prediction(
                mask=unpack_mask(raw, n_points),
                semantic_class=int(item["class"]),
                score=float(item["score"]),
            )
        )
    return out

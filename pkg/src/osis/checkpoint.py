"""Binary checkpoint format for named parameters.

Layout (all little-endian): magic ``OSISCKPT``, format version u32, count
u64, then per parameter: name length u32, UTF-8 name, rank u32, one u64 per
extent, f64 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import Parameter

MAGIC = b"OSISCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(params: Iterable[Parameter], path) -> None:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(params)))
        for p in params:
            raw = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            shape = p.data.shape
            fh.write(struct.pack("<I", len(shape)))
            for ext in shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.astype(np.float64).copy()
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def restore(params: Iterable[Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into parameters; names and shapes must match."""
    params = list(params)
    have = {p.name for p in params}
    if have != set(loaded):
        missing = sorted(have - set(loaded))
        extra = sorted(set(loaded) - have)
        raise CheckpointError(f"parameter set mismatch: missing={missing} extra={extra}")
    for p in params:
        src = loaded[p.name]
        if src.shape != p.data.shape:
            raise CheckpointError(
                f"{p.name}: shape {src.shape} does not match model {p.data.shape}"
            )
        p.data[...] = src

"""Flat binary weight files.

Layout (little-endian): ``b"DMWT"``, u32 version, u32 tensor count, then per
tensor a u8 rank, ``rank`` u32 dims and the float32 values. Tensors follow
``NetConfig.param_shapes()`` order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..geometry import FormatError
from .nets import NetConfig

MAGIC = b"DMWT"
VERSION = 1


def save_weights(path: str | os.PathLike, weights: dict, cfg: NetConfig) -> None:
    shapes = cfg.param_shapes()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(shapes)))
        for name, shape in shapes:
            arr = np.asarray(weights[name])
            if arr.shape != shape:
                raise ValueError(f"weight {name} has shape {arr.shape}, expected {shape}")
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str | os.PathLike, cfg: NetConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight file not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    shapes = cfg.param_shapes()
    if count != len(shapes):
        raise FormatError(f"{path}: {count} tensors, architecture needs {len(shapes)}")
    off = 12
    out = {}
    try:
        for name, shape in shapes:
            (rank,) = struct.unpack_from("<B", data, off)
            dims = struct.unpack_from(f"<{rank}I", data, off + 1)
            off += 1 + 4 * rank
            if tuple(dims) != shape:
                raise FormatError(f"{path}: tensor {name} has dims {dims}, expected {shape}")
            n = int(np.prod(dims))
            vals = np.frombuffer(data, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = vals.reshape(dims).astype(dtype)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated weight file") from exc
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated weight file") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return out

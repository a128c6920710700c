"""Checkpoint serialization.

Layout: magic string, format version, a JSON manifest listing
(name, dtype, shape) per parameter, then the raw buffers concatenated in
manifest order as little-endian floats. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigurationError
from .tensor import Parameter

MAGIC = b"agglodet-ckpt"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    params = list(params)
    manifest = [
        {"name": p.name, "dtype": str(p.tensor.dtype), "shape": list(p.tensor.shape)}
        for p in params
    ]
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.tensor.data, dtype=_DTYPES[str(p.tensor.dtype)]).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ConfigurationError(f"checkpoint {path}: bad magic string")
    off = len(MAGIC)
    version, mlen = struct.unpack_from("<HQ", raw, off)
    if version != VERSION:
        raise ConfigurationError(f"checkpoint {path}: unsupported version {version}")
    off += struct.calcsize("<HQ")
    manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    out: dict[str, np.ndarray] = {}
    for entry in manifest:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ConfigurationError(
                f"checkpoint {path}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(shape)
        out[entry["name"]] = arr.copy()
        off += nbytes
    if off != len(raw):
        raise ConfigurationError(f"checkpoint {path}: trailing bytes")
    return out


def restore_parameters(params: Iterable[Parameter], state: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in state:
            raise ConfigurationError(f"checkpoint missing parameter {p.name!r}")
        arr = state[p.name]
        if arr.shape != p.tensor.shape:
            raise ConfigurationError(
                f"checkpoint parameter {p.name!r} has shape {arr.shape}, "
                f"model expects {p.tensor.shape}")
        p.tensor.data = arr.astype(p.tensor.dtype, copy=True)
        p.momentum_buffer = np.zeros_like(p.tensor.data)
        p.tensor.grad = None

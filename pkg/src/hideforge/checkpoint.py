"""Versioned binary tensor container.

Layout (all integers little-endian):

    magic   8 bytes  b"HFORGE1\\n"
    u32     number of key/value entries
    entry   u32 key length, key (utf-8), u32 value length, value (utf-8)
    u32     number of tensors
    tensor  u32 name length, name (utf-8), u64 rows, u64 cols,
            rows*cols little-endian float64

Vectors are stored as 1 x n tensors. The same container carries base
models, projectors, adapters, anchors and compositions; the "kind" entry
in the key/value block says which.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .numerics import FLOAT, require_finite

MAGIC = b"HFORGE1\n"


def write_container(path, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Write key/value metadata and named tensors; keys keep insertion order."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(meta))
    for key, value in meta.items():
        kb = key.encode("utf-8")
        vb = str(value).encode("utf-8")
        out += struct.pack("<I", len(kb)) + kb
        out += struct.pack("<I", len(vb)) + vb
    out += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(np.atleast_2d(np.asarray(tensor, dtype=FLOAT)))
        if arr.ndim != 2:
            raise ContractError(f"tensor {name!r} must be 1-D or 2-D")
        require_finite(arr, f"tensor {name!r}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<QQ", arr.shape[0], arr.shape[1])
        out += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a tensor container (bad magic)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    def take_str():
        nonlocal off
        (n,) = take("<I")
        s = blob[off : off + n].decode("utf-8")
        off += n
        return s

    meta = {}
    (n_meta,) = take("<I")
    for _ in range(n_meta):
        key = take_str()
        meta[key] = take_str()

    tensors = {}
    (n_tensors,) = take("<I")
    for _ in range(n_tensors):
        name = take_str()
        rows, cols = take("<QQ")
        count = rows * cols
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(rows, cols)
        off += count * 8
        tensors[name] = arr.astype(FLOAT)
    if off != len(blob):
        raise ContractError(f"{path}: trailing bytes after last tensor")
    return meta, tensors

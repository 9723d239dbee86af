"""Binary parameter snapshots.

Layout (all integers little-endian)::

    magic      4 bytes   b"PFMS"
    version    u32       1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (may be "{}")
    count      u32       number of tensors
    count times:
        name_len  u32
        name      bytes  UTF-8
        ndim      u32
        dims      ndim x u64
        data      prod(dims) x f64, row-major

Tensors are written in the order of the mapping they come from.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PFMS"
VERSION = 1


class SnapshotError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SnapshotError(f"truncated snapshot at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise SnapshotError("bad magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if pos != len(view):
        raise SnapshotError(f"{len(view) - pos} trailing bytes")
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())

"""Binary tensor dump used for checkpoints.

Layout (all integers little-endian)::

    b"FITS1"
    u32 format version
    u32 metadata length, metadata bytes (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name length, name (UTF-8), u32 rank, rank x u64 dims,
                prod(dims) x f64 values
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from fits.errors import CheckpointError

MAGIC = b"FITS1"
VERSION = 1


def dump_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("tensor dump is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic; not a FITS1 tensor dump")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported tensor dump version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * count), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor records")
    return tensors, meta

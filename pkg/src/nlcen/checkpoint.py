"""Flat binary checkpoint archive.

Layout (all integers unsigned little-endian)::

    magic    4 bytes  b"NLCK"
    version  u32      currently 1
    count    u32      number of records
    count x record:
        name_len  u32
        name      name_len bytes, UTF-8 (dotted parameter path)
        ndim      u32
        dims      ndim x u32
        data      prod(dims) x float64 little-endian, C order

Records are written in the order given; loading preserves that order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if off + 8 * size > len(buf):
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last record")
    return out


def save_checkpoint(path, state: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(state))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())

"""Binary checkpoint format.

Layout (little-endian)::

    b"VLACKPT1"  u32 group_count
    per group:   u32 len, name bytes, u32 tensor_count
    per tensor:  u32 len, name bytes, u32 rank, u32 extents[rank], f32 payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VLACKPT1"


class CheckpointError(ValueError):
    pass


def _put_str(buf: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    buf += struct.pack("<I", len(b)) + b


def dumps(groups: dict[str, dict[str, np.ndarray]]) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(groups))
    for gname, tensors in groups.items():
        _put_str(buf, gname)
        buf += struct.pack("<I", len(tensors))
        for tname, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            _put_str(buf, tname)
            buf += struct.pack("<I", arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
    return bytes(buf)


def loads(data: bytes) -> dict[str, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = data[pos:pos + n].decode("utf-8")
        pos += n
        return s

    out: dict[str, dict[str, np.ndarray]] = {}
    try:
        (ngroups,) = take("<I")
        for _ in range(ngroups):
            gname = take_str()
            (ntensors,) = take("<I")
            tensors = {}
            for _ in range(ntensors):
                tname = take_str()
                (rank,) = take("<I")
                shape = take(f"<{rank}I") if rank else ()
                count = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
                pos += 4 * count
                tensors[tname] = arr.astype(np.float32)
            out[gname] = tensors
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save(path, groups: dict[str, dict[str, np.ndarray]]) -> None:
    Path(path).write_bytes(dumps(groups))


def load(path) -> dict[str, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())

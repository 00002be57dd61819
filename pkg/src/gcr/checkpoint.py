"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"GCRT" | version u16 | count u32
    per tensor: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | data f64 * prod(dims)
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"GCRT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dimensions")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if len(view) < 10 or bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(view):
                raise CheckpointError(f"{name}: truncated data")
            arr = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").astype(np.float64)
            pos += 8 * size
            out[name] = arr.reshape(dims)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())

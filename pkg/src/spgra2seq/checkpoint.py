"""Binary tensor container.

Layout (all integers little-endian)::

    b"SPG2" | version u32 | count u32 |
    count x [ name_len u32 | name utf-8 | rank u32 | dims u64 x rank | f32 payload ]

Records are written in sorted name order so equal contents give equal bytes.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"SPG2"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an SPG2 container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated container: {e}") from None
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes")
    return out


def save(path, tensors: dict[str, np.ndarray]):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())

"""Binary parameter checkpoints.

Layout (little-endian): ``b"TDPG"``, format version u32, block count u32, then
per block: name length u32, UTF-8 name, rank u32, one u32 per extent, and the
float64 payload in row-major order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"TDPG"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(blocks: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
            out[name] = arr
    except (struct.error, ValueError) as err:
        raise CheckpointFormatError(f"truncated checkpoint: {err}") from None
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, blocks: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(blocks))


def load(path: str | os.PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def digest(blocks: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(blocks)).hexdigest()

"""Raw tensor files: a 16-byte header followed by ``(rank, dims, float32 payload)`` records.

Tensor names and order live outside the file (dataset manifest or checkpoint
config); this module only reads and writes the ordered records.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"KEYIN-TENSOR"
VERSION = 1
HEADER = struct.Struct("<12sI")


class FormatError(ValueError):
    """Corrupted, truncated, or version-mismatched file."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION)]
    for a in arrays:
        a = np.asarray(a, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(data: bytes, count: int | None = None, source: str = "<bytes>") -> list[np.ndarray]:
    if len(data) < HEADER.size:
        raise FormatError(f"{source}: file shorter than header")
    magic, version = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: tensor format version {version}, expected {VERSION}")
    pos = HEADER.size
    out = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise FormatError(f"{source}: truncated rank field")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if rank > 16 or pos + 4 * rank > len(data):
            raise FormatError(f"{source}: truncated or invalid shape (rank {rank})")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"{source}: truncated payload for tensor {len(out)}")
        out.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy())
        pos += nbytes
    if count is not None and len(out) != count:
        raise FormatError(f"{source}: expected {count} tensors, found {len(out)}")
    return out


def write_tensors(path: str | os.PathLike, arrays: Sequence[np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(arrays))


def read_tensors(path: str | os.PathLike, count: int | None = None) -> list[np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), count, source=str(path))

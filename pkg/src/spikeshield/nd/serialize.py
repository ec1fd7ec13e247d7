"""NDT1 binary tensor format.

Layout (little-endian): magic ``b"NDT1"``, u32 rank, rank x u32 extents,
then ``prod(extents)`` float32 values in row-major order.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import ParseError
from .tensor import Tensor

MAGIC = b"NDT1"


def write_tensor(fh: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    start = fh.tell() if fh.seekable() else None

    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            pos = fh.tell() if fh.seekable() else None
            raise ParseError(f"truncated NDT1 record: wanted {n} bytes, got {len(buf)}", pos)
        return buf

    magic = take(4)
    if magic != MAGIC:
        raise ParseError(f"bad NDT1 magic {magic!r}", start)
    (rank,) = struct.unpack("<I", take(4))
    shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    return Tensor(data)


def dumps(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def loads(b: bytes) -> Tensor:
    return read_tensor(io.BytesIO(b))

"""The ``MTNS`` tensor container.

Layout (little-endian throughout)::

    magic   4 bytes  b"MTNS"
    version u16      1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim x u32
    payload prod(dims) IEEE-754 values, row-major
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Tuple

import numpy as np

from ..errors import FormatError

MAGIC = b"MTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    tag = _TAGS.get(array.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {array.dtype}; only float32/float64 can be stored")
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + struct.pack("<HBB", VERSION, tag, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; return it and the offset just past it."""
    if len(buf) < offset + 8:
        raise FormatError("truncated tensor header")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic {buf[offset:offset + 4]!r}")
    version, tag, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    pos = offset + 8
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    fh.write(encode_tensor(array))


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor")
    return arr

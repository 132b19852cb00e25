"""Binary PGM (P5) and PPM (P6) reading/writing, 8-bit only."""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np

from ..errors import FormatError


def _parse_header(data: bytes, magic: bytes) -> Tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset)."""
    if data[:2] != magic:
        raise FormatError(f"expected {magic.decode()} magic, found {data[:2]!r}")
    fields = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise FormatError(f"bad header field {data[start:pos]!r}") from exc
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit maxval is supported, got {maxval}")
    return width, height, maxval, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into an (H, W) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, _, off = _parse_header(data, b"P5")
    payload = data[off:off + width * height]
    if len(payload) != width * height:
        raise FormatError(f"{os.fspath(path)}: payload has {len(payload)} bytes, expected {width * height}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, _, off = _parse_header(data, b"P6")
    size = width * height * 3
    payload = data[off:off + size]
    if len(payload) != size:
        raise FormatError(f"{os.fspath(path)}: payload has {len(payload)} bytes, expected {size}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) array, got shape {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)

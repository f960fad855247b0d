"""Reader/writer for the CORD v1 grid container.

Layout (all little-endian)::

    bytes 0-3   b"CORD"
    byte  4     version (1)
    bytes 5-8   height   uint32
    bytes 9-12  width    uint32
    bytes 13-16 channels uint32
    then height*width*channels float32 values, row-major (h, w, c)

Masks are stored with ``channels == 1`` and values in {0.0, 1.0}.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DimensionError, FormatError

MAGIC = b"CORD"
VERSION = 1
_HEADER = struct.Struct("<4sBIII")


def encode(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise DimensionError(f"expected an (h, w) or (h, w, c) array, got shape {grid.shape}")
    h, w, c = grid.shape
    if min(h, w, c) < 1:
        raise DimensionError(f"grid dimensions must be positive, got {grid.shape}")
    body = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, h, w, c) + body


def decode(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated CORD header")
    magic, version, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CORD version {version}")
    expected = _HEADER.size + 4 * h * w * c
    if len(data) != expected:
        raise FormatError(f"CORD payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return values.reshape(h, w, c).astype(np.float64)


def write_grid(path: str | os.PathLike, grid: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(grid))


def read_grid(path: str | os.PathLike) -> np.ndarray:
    """Read a CORD file as a float64 ``(h, w, c)`` array."""
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {mask.shape}")
    write_grid(path, mask.astype(np.float32))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    grid = read_grid(path)
    if grid.shape[2] != 1:
        raise FormatError(f"mask file must have one channel, found {grid.shape[2]}")
    values = grid[:, :, 0]
    if not np.all((values == 0.0) | (values == 1.0)):
        raise FormatError("mask values must be 0.0 or 1.0")
    return values.astype(bool)

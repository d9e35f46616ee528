"""Framed little-endian binary files shared by all artifact formats.

Every artifact starts with a 4-byte ASCII magic and a u32 version, followed
by format-specific fields. All integers are little-endian u32, all float
payloads are little-endian f32.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when a binary artifact does not match its declared format."""


def write_magic(f: BinaryIO, magic: str, version: int = 1) -> None:
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 ASCII bytes, got {magic!r}")
    f.write(magic.encode("ascii"))
    write_u32(f, version)


def read_magic(f: BinaryIO, magic: str) -> int:
    """Check the 4-byte magic and return the version."""
    got = f.read(4)
    if got != magic.encode("ascii"):
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    return read_u32(f)


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def read_u32(f: BinaryIO) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError("truncated file while reading u32")
    return struct.unpack("<I", data)[0]


def write_f32_array(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise FormatError("truncated file while reading f32 array")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)


def write_u32_array(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def read_u32_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    data = f.read(4 * count)
    if len(data) != 4 * count:
        raise FormatError("truncated file while reading u32 array")
    return np.frombuffer(data, dtype="<u4").reshape(shape).astype(np.int64)

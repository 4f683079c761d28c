"""Low-level binary serialization helpers.

All multi-byte fields are little-endian. Every container format starts with a
4-byte magic string followed by a u16 format version.
"""

import struct

import numpy as np


class BinaryFormatError(ValueError):
    """Raised when a binary file does not match its declared format."""


def write_header(fh, magic: bytes, version: int) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    fh.write(magic)
    fh.write(struct.pack("<H", version))


def read_header(fh, magic: bytes, path="<stream>") -> int:
    got = fh.read(4)
    if got != magic:
        raise BinaryFormatError(f"{path}: expected magic {magic!r}, found {got!r}")
    raw = fh.read(2)
    if len(raw) != 2:
        raise BinaryFormatError(f"{path}: truncated version field")
    return struct.unpack("<H", raw)[0]


def write_string(fh, text: str) -> None:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError(f"string too long for u16 length prefix: {len(data)} bytes")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def read_string(fh, path="<stream>") -> str:
    raw = fh.read(2)
    if len(raw) != 2:
        raise BinaryFormatError(f"{path}: truncated string length")
    n = struct.unpack("<H", raw)[0]
    data = fh.read(n)
    if len(data) != n:
        raise BinaryFormatError(f"{path}: truncated string payload")
    return data.decode("utf-8")


def write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def read_u32(fh, path="<stream>") -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise BinaryFormatError(f"{path}: truncated u32 field")
    return struct.unpack("<I", raw)[0]


def read_u64(fh, path="<stream>") -> int:
    raw = fh.read(8)
    if len(raw) != 8:
        raise BinaryFormatError(f"{path}: truncated u64 field")
    return struct.unpack("<Q", raw)[0]


def write_f32_array(fh, arr: np.ndarray) -> None:
    """Write array data row-major as 32-bit little-endian reals (no shape info)."""
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(fh, count: int, path="<stream>") -> np.ndarray:
    data = fh.read(4 * count)
    if len(data) != 4 * count:
        raise BinaryFormatError(f"{path}: truncated float payload "
                                f"(wanted {4 * count} bytes, got {len(data)})")
    return np.frombuffer(data, dtype="<f4").copy()


def write_f64(fh, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_f64(fh, path="<stream>") -> float:
    raw = fh.read(8)
    if len(raw) != 8:
        raise BinaryFormatError(f"{path}: truncated f64 field")
    return struct.unpack("<d", raw)[0]


def write_named_tensors(fh, tensors: dict) -> None:
    """Write a name→array table: count, then per tensor a name, a shape list,
    and the row-major 32-bit payload."""
    write_u32(fh, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        write_string(fh, name)
        write_u32(fh, arr.ndim)
        for d in arr.shape:
            write_u32(fh, d)
        write_f32_array(fh, arr)


def read_named_tensors(fh, path="<stream>") -> dict:
    count = read_u32(fh, path)
    tensors = {}
    for _ in range(count):
        name = read_string(fh, path)
        ndim = read_u32(fh, path)
        shape = tuple(read_u32(fh, path) for _ in range(ndim))
        size = 1
        for d in shape:
            size *= d
        tensors[name] = read_f32_array(fh, size, path).reshape(shape)
    return tensors

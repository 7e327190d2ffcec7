"""Binary tensor serialization.

A tensor block is length-prefixed: the rank as a 64-bit little-endian
integer, each dimension as a 64-bit little-endian integer, then the raw
float32 data, little-endian, row-major. Named-blob files stack a JSON
header with a sequence of (name, block) records; checkpoints, datasets
and calibration sets all reuse this container.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

__all__ = [
    "write_tensor_block",
    "read_tensor_block",
    "write_blob_file",
    "read_blob_file",
    "FormatError",
]

MAGIC = b"QSLB"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed or truncated serialized data."""


def write_tensor_block(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    f.write(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated tensor block: wanted {n} bytes, got {len(raw)}")
    return raw


def read_tensor_block(f: BinaryIO) -> np.ndarray:
    (ndim,) = struct.unpack("<Q", _read_exact(f, 8))
    if ndim > 32:
        raise FormatError(f"implausible tensor rank {ndim}")
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(f, 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_blob_file(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor container with a JSON header.

    Key order is canonicalized so identical content is byte-identical.
    """
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(struct.pack("<Q", len(tensors)))
        for name in tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            write_tensor_block(f, tensors[name])


def read_blob_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a tensor container (bad magic {magic!r})")
        (version,) = struct.unpack("<Q", _read_exact(f, 8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", _read_exact(f, 8))
        header = json.loads(_read_exact(f, hlen).decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(f, 8))
            name = _read_exact(f, nlen).decode("utf-8")
            tensors[name] = read_tensor_block(f)
    return header, tensors

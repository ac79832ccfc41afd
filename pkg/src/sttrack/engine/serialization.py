"""STKW binary weight files.

Layout (little-endian): magic ``STKW``, format version u32, tensor count u32;
then per tensor: name length u32, UTF-8 name, rank u32, one u32 per extent,
raw float32 values in row-major order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"STKW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


class WeightVersionError(WeightFormatError):
    pass


def dumps(tensors: "dict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFormatError(f"truncated weight file at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightVersionError(f"unsupported weight format version {version} (expected {VERSION})")
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(blob):
        raise WeightFormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def save(tensors: "dict[str, np.ndarray]", path) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())

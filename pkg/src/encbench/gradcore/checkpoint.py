"""NNP1 binary checkpoint codec.

Layout: magic ``NNP1``, u32 entry count, then per entry a u16 name length,
the UTF-8 name, a u8 rank, ``rank`` u32 dims and the little-endian f32
payload.  All integers are little-endian.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from ..errors import FormatError

MAGIC = b"NNP1"


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not UTF-8 at offset {pos}") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path: Union[str, Path], entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())

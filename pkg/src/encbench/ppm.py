"""Binary PPM (P6, maxval 255) reader and writer."""
from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an H x W x 3 uint8 array, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def _tokens(buf: bytes, count: int):
    """Yield ``count`` header tokens and the offset of the pixel data."""
    out, pos, n = [], 0, len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("PPM header ended early")
        out.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("PPM header is not followed by a whitespace byte")
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise FormatError("not a binary PPM (P6) file")
    toks, offset = _tokens(buf, 4)
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise FormatError("PPM header has non-integer fields") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    data = buf[offset:offset + need]
    if len(data) != need:
        raise FormatError(f"PPM payload truncated: {len(data)} of {need} bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))

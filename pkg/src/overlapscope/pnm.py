"""Minimal binary PGM (P5) / PPM (P6) codec.

Samples wider than one byte are stored big-endian, as the Netpbm format
requires.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import LoadError
from .noise import Frame


def _tokens(buf: bytes, count: int):
    """Yield ``count`` header tokens and the offset of the raster."""
    out = []
    i = 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise LoadError("truncated PNM header")
        out.append(buf[start:i])
    # exactly one whitespace byte separates header from raster
    return out, i + 1


def decode(buf: bytes) -> Frame:
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise LoadError(f"unsupported PNM magic {magic!r}")
    width, height, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise LoadError(f"invalid maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * channels * dtype.itemsize
    raster = buf[offset : offset + nbytes]
    if len(raster) != nbytes:
        raise LoadError(f"raster truncated: expected {nbytes} bytes, got {len(raster)}")
    data = np.frombuffer(raster, dtype=dtype).reshape((height, width, channels) if channels == 3 else (height, width))
    data = data.astype(np.uint16 if maxval > 255 else np.uint8)
    n_bit = int(math.log2(maxval + 1))
    if 2**n_bit - 1 != maxval:
        n_bit = int(math.ceil(math.log2(maxval + 1)))
    return Frame(data, n_bit=n_bit)


def encode(frame: Frame) -> bytes:
    if frame.n_bit is None:
        raise ValueError("only quantized frames can be written as PNM")
    maxval = 2**frame.n_bit - 1
    data = np.asarray(frame.data)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    magic = b"P6" if data.ndim == 3 else b"P5"
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = b"%s\n%d %d\n%d\n" % (magic, data.shape[1], data.shape[0], maxval)
    return header + np.ascontiguousarray(data.astype(dtype)).tobytes()


def read_pnm(path) -> Frame:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"missing image file: {path}") from exc
    try:
        return decode(buf)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, LoadError):
            raise LoadError(f"{path}: {exc}") from exc
        raise LoadError(f"{path}: malformed PNM header") from exc


def write_pnm(path, frame: Frame) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(frame))

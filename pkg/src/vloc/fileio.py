"""Small binary file formats: binary PPM images and raw float32 grids."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

_F32_MAGIC = b"VLDP"


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image as binary P6."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ValueError(f"not a binary PPM: {path}")
    # Header is three whitespace-separated tokens after the magic.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError("only maxval 255 PPMs are supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_f32_grid(path, grid: np.ndarray) -> None:
    """Row-major little-endian float32 grid with a 16-byte header."""
    arr = np.ascontiguousarray(grid, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_F32_MAGIC)
        fh.write(struct.pack("<III", w, h, 0))
        fh.write(arr.tobytes())


def read_f32_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _F32_MAGIC:
            raise ValueError(f"bad magic in float grid: {path}")
        w, h, _ = struct.unpack("<III", fh.read(12))
        arr = np.frombuffer(fh.read(w * h * 4), dtype="<f4")
    return arr.reshape(h, w).copy()


def file_crc32(path) -> int:
    return zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF

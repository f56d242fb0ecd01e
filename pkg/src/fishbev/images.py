"""Binary PGM (P5) / PPM (P6) writers and readers for masks and diagnostics."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .synth import PALETTE


def to_uint8(arr, lo=None, hi=None) -> np.ndarray:
    """Linearly rescale a real array to 0..255; NaN becomes 0."""
    a = np.asarray(arr, dtype=np.float64)
    finite = np.isfinite(a)
    if not finite.any():
        return np.zeros(a.shape, np.uint8)
    lo = np.nanmin(a[finite]) if lo is None else lo
    hi = np.nanmax(a[finite]) if hi is None else hi
    scaled = np.where(finite, (a - lo) / (hi - lo if hi > lo else 1.0), 0.0)
    return np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)


def write_pgm(path, gray) -> None:
    g = np.asarray(gray)
    if g.ndim != 2 or g.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    Path(path).write_bytes(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode() + g.tobytes())


def write_ppm(path, rgb) -> None:
    c = np.asarray(rgb)
    if c.ndim != 3 or c.shape[2] != 3 or c.dtype != np.uint8:
        raise ValueError("PPM needs an [H, W, 3] uint8 array")
    Path(path).write_bytes(f"P6\n{c.shape[1]} {c.shape[0]}\n255\n".encode() + c.tobytes())


_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m or int(m.group(4)) != 255:
        raise ValueError(f"{path}: unsupported image header")
    w, h = int(m.group(2)), int(m.group(3))
    shape = (h, w) if m.group(1) == b"P5" else (h, w, 3)
    return np.frombuffer(raw[m.end():], dtype=np.uint8).reshape(shape)


def colorize(classes) -> np.ndarray:
    return PALETTE[np.asarray(classes, dtype=np.int64)]


def write_class_map(stem, classes) -> None:
    """``stem``.pgm with the class index as gray level and ``stem``.ppm in palette colours."""
    cls = np.asarray(classes, dtype=np.int64)
    write_pgm(f"{stem}.pgm", cls.astype(np.uint8))
    write_ppm(f"{stem}.ppm", colorize(cls))

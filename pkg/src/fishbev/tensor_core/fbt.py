"""FBT1 binary tensor files.

Layout: magic ``FBT1``, u8 dtype code (0 = real32, 1 = real64), u8 ndim,
ndim little-endian u64 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FBT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FBTError(ValueError):
    """Malformed FBT1 file; the message names the path and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{os.fspath(path)}: byte {offset}: {reason}")
        self.path = os.fspath(path)
        self.offset = offset


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"FBT1 stores real32/real64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 6:
        raise FBTError(path, len(buf), "truncated header")
    if buf[:4] != MAGIC:
        raise FBTError(path, 0, f"bad magic {buf[:4]!r}")
    code, ndim = buf[4], buf[5]
    if code not in _CODES:
        raise FBTError(path, 4, f"unknown dtype code {code}")
    end = 6 + 8 * ndim
    if len(buf) < end:
        raise FBTError(path, len(buf), "truncated extents")
    shape = struct.unpack(f"<{ndim}Q", buf[6:end])
    dt = _CODES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - end != need:
        raise FBTError(path, end, f"payload is {len(buf) - end} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dt, offset=end).reshape(shape).astype(dt.newbyteorder("="))


def write_fbt(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def read_fbt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), path)

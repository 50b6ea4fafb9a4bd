"""Reader/writer for the ADTN tensor container.

Layout, all little-endian:

    magic   4 bytes  b"ADTN"
    version u8       currently 1
    dtype   u8       0=f32, 1=f64, 2=u8, 3=u16
    ndim    u8
    reserved u8      0
    dims    ndim x u64
    payload row-major array data

This is a self-contained copy of the container format so the exporter
has no import dependency on the consumer package.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADTN"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<u2"}
_CODE_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                  np.dtype(np.uint8): 2, np.dtype(np.uint16): 3}


class FormatError(Exception):
    """Malformed or unsupported tensor file."""


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _CODE_FOR_KIND:
        raise FormatError(f"cannot serialize dtype {dt}")
    if arr.ndim == 0 or any(d == 0 for d in arr.shape):
        raise FormatError(f"need non-empty dimensions, got {arr.shape}")
    code = _CODE_FOR_KIND[dt]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sBBBB", MAGIC, FORMAT_VERSION, code, arr.ndim, 0))
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, code, ndim, _ = struct.unpack("<4sBBBB", raw[:8])
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES or ndim == 0:
        raise FormatError(f"{path}: bad dtype code {code} or rank {ndim}")
    if len(raw) < 8 + 8 * ndim:
        raise FormatError(f"{path}: header cut short")
    dims = tuple(int(d) for d in np.frombuffer(raw[8:8 + 8 * ndim], dtype="<u8"))
    dt = np.dtype(_DTYPE_CODES[code])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[8 + 8 * ndim:]
    if len(payload) != count * dt.itemsize:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()

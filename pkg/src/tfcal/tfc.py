"""Reader/writer for the ``TFC1`` rank-4 tensor file format.

Layout (little endian)::

    b"TFC1"  version:u8(=1)  N:u32 C:u32 H:u32 W:u32  dtype:u8  payload

``dtype`` is 1 for float32 and 2 for float64; the payload is row-major.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TFC1"
VERSION = 1
_HEADER = struct.Struct("<4sB4IB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TensorFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: offset {offset}: {message}")


def as_rank4(array: np.ndarray) -> np.ndarray:
    """Left-pad the shape with ones up to rank 4."""
    array = np.asarray(array)
    if array.ndim > 4:
        raise ValueError(f"cannot store rank-{array.ndim} array as TFC1")
    return array.reshape((1,) * (4 - array.ndim) + array.shape)


def encode(array: np.ndarray) -> bytes:
    array = as_rank4(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}; expected float32 or float64")
    header = _HEADER.pack(MAGIC, VERSION, *array.shape, code)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError(path, len(buf), f"truncated header ({len(buf)} of {_HEADER.size} bytes)")
    magic, version, n, c, h, w, code = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFormatError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(path, 4, f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(path, _HEADER.size - 1, f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = n * c * h * w * dtype.itemsize
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TensorFormatError(path, len(buf), f"truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise TensorFormatError(path, _HEADER.size + expected, f"{payload - expected} trailing bytes")
    data = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size, count=n * c * h * w)
    return data.reshape(n, c, h, w).astype(dtype.newbyteorder("="))


def write_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_tensor(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"tensor file not found: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read(), path)

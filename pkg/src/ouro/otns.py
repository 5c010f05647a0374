"""OTNS v1: a tiny self-describing float32 tensor container.

Layout (all integers little-endian u32)::

    b"OTNS" | version=1 | ndim | dims[ndim] | dtype (0=float32)
    | row-major little-endian payload | name_len | utf-8 name

Round trips are byte exact; PNG previews exist elsewhere but are never the
numeric source of truth.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OTNS"
VERSION = 1
DTYPE_FLOAT32 = 0
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}


class OTNSError(ValueError):
    """Base class for container parse errors."""


class BadMagicError(OTNSError):
    pass


class VersionMismatchError(OTNSError):
    pass


class TruncatedPayloadError(OTNSError):
    pass


class UnsupportedDtypeError(OTNSError):
    pass


def encode(array: np.ndarray, name: str = "") -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise OTNSError(f"refusing to write non-finite values to tensor {name!r}")
    name_bytes = name.encode("utf-8")
    header = MAGIC + struct.pack(f"<II{arr.ndim}II", VERSION, arr.ndim, *arr.shape, DTYPE_FLOAT32)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
    return header + payload + struct.pack("<I", len(name_bytes)) + name_bytes


def decode(buf: bytes) -> tuple[np.ndarray, str]:
    view = memoryview(buf)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take_u32(count: int = 1) -> tuple[int, ...]:
        nonlocal pos
        end = pos + 4 * count
        if end > len(view):
            raise TruncatedPayloadError(f"header truncated at byte {len(view)}")
        vals = struct.unpack_from(f"<{count}I", view, pos)
        pos = end
        return vals

    (version,) = take_u32()
    if version != VERSION:
        raise VersionMismatchError(f"unsupported OTNS version {version} (reader is v{VERSION})")
    (ndim,) = take_u32()
    dims = take_u32(ndim) if ndim else ()
    (dtype_code,) = take_u32()
    if dtype_code not in _DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype code {dtype_code}")
    dtype = _DTYPES[dtype_code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if pos + nbytes > len(view):
        raise TruncatedPayloadError(f"payload needs {nbytes} bytes, only {len(view) - pos} present")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims).astype(np.float32)
    pos += nbytes
    (name_len,) = take_u32()
    if pos + name_len > len(view):
        raise TruncatedPayloadError("channel name truncated")
    name = bytes(view[pos:pos + name_len]).decode("utf-8")
    return arr, name


def write_tensor(path: str | os.PathLike, array: np.ndarray, name: str = "") -> None:
    Path(path).write_bytes(encode(array, name))


def read_tensor(path: str | os.PathLike) -> tuple[np.ndarray, str]:
    return decode(Path(path).read_bytes())

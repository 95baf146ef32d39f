"""CMT1 binary tensor container.

Layout::

    b"CMT1" | u8 dtype code | u8 ndim | ndim x u64 LE extents | LE row-major payload

dtype codes: 1 = float32, 2 = float64, 3 = uint8. Reading a written tensor is
bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"CMT1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_BY_KIND = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint8"): 3}


class CMTError(ValueError):
    """Malformed or unsupported CMT1 data."""


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _BY_KIND.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CMTError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 0:
        raise CMTError("zero-dimensional tensors are not representable")
    if arr.ndim > 255:
        raise CMTError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise CMTError("truncated header")
    if buf[:4] != MAGIC:
        raise CMTError(f"bad magic {buf[:4]!r}")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise CMTError(f"unknown dtype code {code}")
    if ndim == 0:
        raise CMTError("zero-dimensional tensors are not representable")
    off = 6 + 8 * ndim
    if len(buf) < off:
        raise CMTError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dt = _CODES[code]
    need = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
    if len(buf) - off != need:
        raise CMTError(f"payload has {len(buf) - off} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=need // dt.itemsize).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def cmt_write(path: Union[str, Path, BinaryIO], arr: np.ndarray) -> None:
    data = encode(arr)
    if hasattr(path, "write"):
        path.write(data)
        return
    Path(path).write_bytes(data)


def cmt_read(path: Union[str, Path, BinaryIO]) -> np.ndarray:
    if hasattr(path, "read"):
        return decode(path.read())
    return decode(Path(path).read_bytes())

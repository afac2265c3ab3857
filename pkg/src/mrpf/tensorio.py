"""MRPT binary tensor files.

Layout: 4 magic bytes, little-endian uint32 rank, ``rank`` uint32 extents,
then the row-major payload.  Magic ``MRPT`` carries float32 values.  Magic
``MRPD`` is the same layout with float64 values, used so 64-bit weights
survive a round trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_F32 = b"MRPT"
MAGIC_F64 = b"MRPD"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def encode(arr, precision: int | None = None) -> bytes:
    arr = np.asarray(arr)
    if precision is None:
        precision = 64 if arr.dtype == np.float64 or arr.dtype.kind in "iu" else 32
    magic = MAGIC_F64 if precision == 64 else MAGIC_F32
    header = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[magic]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise TensorFormatError(f"{source}: truncated header")
    magic = bytes(buf[:4])
    if magic not in _DTYPES:
        raise TensorFormatError(f"{source}: bad magic {magic!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError(f"{source}: truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _DTYPES[magic]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise TensorFormatError(
            f"{source}: payload is {len(buf) - off} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, arr, precision: int | None = None) -> None:
    Path(path).write_bytes(encode(arr, precision))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"{path}: {exc}") from exc
    return decode(buf, str(path))

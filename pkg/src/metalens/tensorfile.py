"""Binary tensor container: magic "MTEN", little-endian, float32 payload.

Layout: magic (4 bytes) | version u32 | dtype u32 (0 = f32) | ndim u32 |
dims u64[ndim] | payload f32[prod(dims)].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .imaging import DecodeError

MAGIC = b"MTEN"
VERSION = 1
DTYPE_F32 = 0


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise DecodeError(f"{path}: bad magic {data[:4]!r}", offset=0)
    if len(data) < 16:
        raise DecodeError(f"{path}: truncated header", offset=len(data))
    version, dtype, ndim = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise DecodeError(f"{path}: unsupported version {version}", offset=4)
    if dtype != DTYPE_F32:
        raise DecodeError(f"{path}: unsupported dtype code {dtype}", offset=8)
    dims_end = 16 + 8 * ndim
    if len(data) < dims_end:
        raise DecodeError(f"{path}: truncated dims", offset=len(data))
    dims = struct.unpack_from(f"<{ndim}Q", data, 16)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + 4 * count
    if len(data) != expected:
        raise DecodeError(
            f"{path}: payload length {len(data) - dims_end} != {4 * count} bytes",
            offset=min(len(data), expected),
        )
    arr = np.frombuffer(data[dims_end:], dtype="<f4").reshape(dims)
    return arr.astype(np.float32, copy=True)

"""Dense f32 tensors and the ``.ntsr`` binary container.

File layout (all integers little-endian)::

    magic    4 bytes  b"NTSR"
    version  u32      1
    dtype    u8       1 (float32)
    rank     u8       1..4
    reserved 2 bytes  zero
    dims     rank x u64
    payload  4 * prod(dims) bytes, row-major float32

In memory a tensor is simply a C-contiguous ``np.float32`` array that passed
:func:`as_tensor`.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, IoError, ValidationError

MAGIC = b"NTSR"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 4

_FIXED = struct.Struct("<4sIBB2s")


def as_tensor(x) -> np.ndarray:
    """Validate ``x`` and return it as a contiguous float32 array.

    Raises ValidationError for rank outside 1..4, empty extents or any
    non-finite element.
    """
    arr = np.asarray(x, dtype=np.float32)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise ValidationError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    arr = np.ascontiguousarray(arr)
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"tensor extents must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("tensor contains NaN or Inf")
    return arr


def header_size(rank: int) -> int:
    return _FIXED.size + 8 * rank


def encode_tensor(x) -> bytes:
    t = as_tensor(x)
    head = _FIXED.pack(MAGIC, VERSION, DTYPE_F32, t.ndim, b"\x00\x00")
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + dims + t.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _FIXED.size:
        raise FormatError("truncated header")
    magic, version, dtype, rank, _ = _FIXED.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} outside 1..{MAX_RANK}")
    off = _FIXED.size
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    if any(d < 1 for d in dims):
        raise FormatError(f"zero extent in dims {dims}")
    off += 8 * rank
    n = 1
    for d in dims:
        n *= d
    if len(buf) - off != 4 * n:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
    arr = arr.reshape(dims)
    if not np.isfinite(arr).all():
        raise ValidationError("tensor file contains NaN or Inf")
    return arr


def read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc


def write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def load_tensor(path) -> np.ndarray:
    return decode_tensor(read_bytes(path))


def save_tensor(t, path) -> None:
    # encode first so a bad tensor never truncates an existing file
    write_bytes(path, encode_tensor(t))

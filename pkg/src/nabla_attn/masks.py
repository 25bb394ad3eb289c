"""Block masks: adaptive CDF-thresholded masks, sliding-tile masks, and I/O.

A block mask has shape ``[heads, R, R]`` with ``R = S / N``; bit ``(h, r, c)``
says whether query block ``r`` attends to key block ``c`` in head ``h``.
Block indices follow the patch-grouped layout from :mod:`nabla_attn.layout`:
``b = t * (hb * wb) + i * wb + j`` for frame ``t`` and patch ``(i, j)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GeometryError, ParamError
from .layout import TokenGrid
from .tensor_io import read_bytes, write_bytes

NMSK_MAGIC = b"NMSK"
NMSK_VERSION = 1
_NMSK_HEAD = struct.Struct("<4sIQQQ")


class BlockMask:
    """Per-head boolean matrix over (query block, key block) pairs."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim == 2:
            bits = bits[None]
        if bits.ndim != 3:
            raise GeometryError(f"mask bits must be [heads, rows, cols], got {bits.shape}")
        if bits.shape[1] != bits.shape[2]:
            raise GeometryError(f"mask must be square, got {bits.shape[1]}x{bits.shape[2]}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise GeometryError(f"empty mask {bits.shape}")
        bits = np.ascontiguousarray(bits)
        bits.flags.writeable = False
        self.bits = bits

    @property
    def heads(self) -> int:
        return self.bits.shape[0]

    @property
    def rows(self) -> int:
        return self.bits.shape[1]

    @property
    def cols(self) -> int:
        return self.bits.shape[2]

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def row_counts(self) -> np.ndarray:
        return np.count_nonzero(self.bits, axis=-1)

    def is_full(self) -> bool:
        return bool(self.bits.all())

    @classmethod
    def full(cls, rows: int, heads: int = 1) -> "BlockMask":
        return cls(np.ones((heads, rows, rows), dtype=bool))

    @classmethod
    def identity(cls, rows: int, heads: int = 1) -> "BlockMask":
        return cls(np.broadcast_to(np.eye(rows, dtype=bool), (heads, rows, rows)))

    def __eq__(self, other):
        if not isinstance(other, BlockMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool((self.bits == other.bits).all())

    def __repr__(self):
        return (
            f"BlockMask(heads={self.heads}, rows={self.rows}, "
            f"popcount={self.popcount()}, sparsity={sparsity(self):.4f})"
        )


@dataclass(frozen=True)
class NablaParams:
    thr: float
    block_n: int
    scale: float | None = None  # defaults to 1/sqrt(D)

    def __post_init__(self):
        if not (0.0 <= self.thr <= 1.0):
            raise ParamError(f"thr must lie in [0, 1], got {self.thr}")
        if int(self.block_n) != self.block_n or self.block_n < 1:
            raise ParamError(f"block_n must be a positive integer, got {self.block_n}")


@dataclass(frozen=True)
class StaWindow:
    w_t: int
    w_h: int
    w_w: int
    grid: TokenGrid = field(compare=True)

    def __post_init__(self):
        ext = self.grid.block_shape
        for name, w, n in zip(("w_t", "w_h", "w_w"), self.extents, ext):
            if int(w) != w or w < 1:
                raise ParamError(f"{name} must be a positive integer, got {w}")
            if w % 2 == 0:
                raise ParamError(f"{name}={w} must be odd so the window centres on the query")
            if w > n:
                raise ParamError(f"{name}={w} exceeds grid extent {n} blocks")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.w_t, self.w_h, self.w_w)

    @classmethod
    def parse(cls, text: str, grid: TokenGrid) -> "StaWindow":
        """Parse ``"wt,wh,ww"``."""
        try:
            wt, wh, ww = (int(s) for s in text.split(","))
        except ValueError:
            raise ParamError(f"window must be wt,wh,ww, got {text!r}") from None
        return cls(wt, wh, ww, grid)


# -- adaptive masks -----------------------------------------------------------


def pool_blocks(x, block_n: int) -> np.ndarray:
    """Mean over consecutive runs of ``block_n`` tokens: [h, S, D] -> [h, S/N, D]."""
    x = np.asarray(x, dtype=np.float64)
    h, s, d = x.shape
    if s % block_n:
        raise GeometryError(f"sequence length {s} not divisible by block size {block_n}")
    return x.reshape(h, s // block_n, block_n, d).mean(axis=2)


def reduced_attention(q, k, block_n: int, scale: float | None = None) -> np.ndarray:
    """Row-softmax of pooled query/key scores, shape [h, S/N, S/N]."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.ndim != 3 or q.shape != k.shape:
        raise GeometryError(f"q and k must share shape [h, S, D], got {q.shape} and {k.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    qa = pool_blocks(q, block_n)
    ka = pool_blocks(k, block_n)
    scores = np.matmul(qa, ka.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def cdf_threshold(probs, thr: float) -> np.ndarray:
    """Keep, per row, the largest entries whose cumulative mass reaches ``thr``.

    Rows are sorted ascending (stable, so ties go by column index), summed
    left to right, and positions whose running sum is ``>= 1 - thr`` are kept.
    The last running sum is pinned to 1 so at least one entry always survives.
    """
    if not (0.0 <= thr <= 1.0):
        raise ParamError(f"thr must lie in [0, 1], got {thr}")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(probs, axis=-1, kind="stable")
    vals = np.take_along_axis(probs, order, axis=-1)
    cvals = np.cumsum(vals, axis=-1)
    cvals[..., -1] = 1.0
    keep_sorted = cvals >= 1.0 - thr
    keep = np.empty_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    return keep


def nabla_mask(q, k, params: NablaParams) -> BlockMask:
    """Adaptive block mask from pooled queries and keys (one mask per head)."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.ndim != 3 or q.shape != k.shape:
        raise GeometryError(f"q and k must share shape [h, S, D], got {q.shape} and {k.shape}")
    if q.shape[1] % params.block_n:
        raise GeometryError(
            f"sequence length {q.shape[1]} not divisible by block size {params.block_n}"
        )
    probs = reduced_attention(q, k, params.block_n, params.scale)
    return BlockMask(cdf_threshold(probs, params.thr))


# -- sliding-tile masks -------------------------------------------------------


def _axis_window(n: int, w: int) -> np.ndarray:
    # window start is clamped so all w positions stay inside [0, n)
    centre = np.arange(n)
    start = np.clip(centre - w // 2, 0, n - w)
    pos = np.arange(n)
    return (pos >= start[:, None]) & (pos < start[:, None] + w)


def sta_mask(window: StaWindow) -> BlockMask:
    """Static 3D window mask on the block grid; a single broadcastable head."""
    (nt, nh, nw) = window.grid.block_shape
    mt = _axis_window(nt, window.w_t).astype(np.uint8)
    mh = _axis_window(nh, window.w_h).astype(np.uint8)
    mw = _axis_window(nw, window.w_w).astype(np.uint8)
    return BlockMask(np.kron(mt, np.kron(mh, mw)).astype(bool))


def count_dense_blocks_eq5(window: StaWindow) -> int:
    """Closed-form dense block count: window volume times grid volume, in blocks."""
    nt, nh, nw = window.grid.block_shape
    return window.w_t * window.w_h * window.w_w * nt * nh * nw


# -- combination and statistics ----------------------------------------------


def join_masks(a: BlockMask, b: BlockMask) -> BlockMask:
    """Elementwise OR; a single-head operand broadcasts over the other's heads."""
    if a.rows != b.rows:
        raise GeometryError(f"mask sizes differ: {a.rows} vs {b.rows}")
    if a.heads != b.heads and 1 not in (a.heads, b.heads):
        raise GeometryError(f"head counts {a.heads} and {b.heads} do not broadcast")
    return BlockMask(np.logical_or(a.bits, b.bits))


def sparsity(m: BlockMask) -> float:
    return 1.0 - m.popcount() / m.bits.size


def expand_to_tokens(m: BlockMask, block_n: int) -> np.ndarray:
    """Token-level boolean mask [heads, S, S]."""
    return np.repeat(np.repeat(m.bits, block_n, axis=1), block_n, axis=2)


# -- persistence --------------------------------------------------------------


def encode_mask(m: BlockMask) -> bytes:
    head = _NMSK_HEAD.pack(NMSK_MAGIC, NMSK_VERSION, m.heads, m.rows, m.cols)
    # one MSB-first byte run per row, each padded to a byte boundary
    return head + np.packbits(m.bits, axis=-1, bitorder="big").tobytes()


def decode_mask(buf: bytes) -> BlockMask:
    if len(buf) < _NMSK_HEAD.size:
        raise FormatError("truncated mask header")
    magic, version, h, rows, cols = _NMSK_HEAD.unpack_from(buf, 0)
    if magic != NMSK_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != NMSK_VERSION:
        raise FormatError(f"unsupported mask version {version}")
    if h < 1 or rows < 1 or rows != cols:
        raise FormatError(f"invalid mask dims h={h} rows={rows} cols={cols}")
    row_bytes = (cols + 7) // 8
    payload = buf[_NMSK_HEAD.size:]
    if len(payload) != h * rows * row_bytes:
        raise FormatError(f"mask payload is {len(payload)} bytes, expected {h * rows * row_bytes}")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(h, rows, row_bytes)
    bits = np.unpackbits(packed, axis=-1, count=cols, bitorder="big").astype(bool)
    return BlockMask(bits)


def save_mask(m: BlockMask, path) -> None:
    write_bytes(path, encode_mask(m))


def load_mask(path) -> BlockMask:
    return decode_mask(read_bytes(path))


def export_mask_image(m: BlockMask, head: int, path) -> None:
    """Write one head as a binary PGM: one pixel per block, 255 attended, 0 masked."""
    if not 0 <= head < m.heads:
        raise ParamError(f"head {head} out of range for {m.heads} heads")
    pixels = np.where(m.bits[head], 255, 0).astype(np.uint8)
    header = f"P5\n{m.cols} {m.rows}\n255\n".encode("ascii")
    write_bytes(path, header + pixels.tobytes())

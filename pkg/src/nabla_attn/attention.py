"""Scaled dot-product attention: dense, block-masked dense, and block-sparse.

All functions take ``q, k, v`` of shape ``[h, S, D]`` and compute in float64.
Masked positions are excluded from the softmax normalisation rather than
receiving a large negative bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ValidationError
from .kernels import get_backend
from .masks import BlockMask, expand_to_tokens


@dataclass
class AttentionGrad:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


@dataclass
class FlopCounter:
    """Multiply-accumulate tallies, filled in by the kernels that are passed one."""

    score_macs: int = 0
    value_macs: int = 0
    mask_macs: int = 0
    block_pairs: int = 0

    @property
    def total(self) -> int:
        return self.score_macs + self.value_macs + self.mask_macs

    def add_pairs(self, pairs: int, block_n: int, d: int) -> None:
        self.block_pairs += pairs
        self.score_macs += pairs * block_n * block_n * d
        self.value_macs += pairs * block_n * block_n * d


def _check_qkv(q, k, v, scale):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise GeometryError(
            f"q, k, v must share shape [h, S, D]; got {q.shape}, {k.shape}, {v.shape}"
        )
    for name, x in (("q", q), ("k", k), ("v", v)):
        if not np.isfinite(x).all():
            raise ValidationError(f"{name} contains NaN or Inf")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    return (
        np.ascontiguousarray(q),
        np.ascontiguousarray(k),
        np.ascontiguousarray(v),
        float(scale),
    )


def _check_mask(m: BlockMask, h: int, s: int, block_n: int) -> np.ndarray:
    if block_n < 1 or s % block_n:
        raise GeometryError(f"sequence length {s} not divisible by block size {block_n}")
    if m.rows * block_n != s:
        raise GeometryError(f"mask has {m.rows} blocks of {block_n}, sequence has {s} tokens")
    if m.heads not in (1, h):
        raise GeometryError(f"mask has {m.heads} heads, inputs have {h}")
    if not m.bits.any(axis=-1).all():
        raise ValidationError("mask has a query block with no active key block")
    return m.bits.view(np.uint8)


def _softmax_rows(scores):
    mx = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - mx)
    tot = e.sum(axis=-1, keepdims=True)
    return e / tot, (mx + np.log(tot))[..., 0]


def dense_attention(q, k, v, scale=None, *, counter=None, return_lse=False):
    """softmax(q k^T * scale) v per head."""
    q, k, v, scale = _check_qkv(q, k, v, scale)
    h, s, d = q.shape
    probs, lse = _softmax_rows(np.matmul(q, k.transpose(0, 2, 1)) * scale)
    out = np.matmul(probs, v)
    if counter is not None:
        counter.add_pairs(h, s, d)
    return (out, lse) if return_lse else out


def masked_dense_attention(q, k, v, mask: BlockMask, block_n: int, scale=None):
    """Dense attention with masked tiles dropped from each row's softmax."""
    q, k, v, scale = _check_qkv(q, k, v, scale)
    h, s, _ = q.shape
    _check_mask(mask, h, s, block_n)
    allowed = expand_to_tokens(mask, block_n)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    scores = np.where(allowed, scores, -np.inf)
    probs, _ = _softmax_rows(scores)
    return np.matmul(probs, v)


def block_sparse_attention(
    q, k, v, mask: BlockMask, block_n: int, scale=None, *,
    counter=None, return_lse=False, backend=None,
):
    """Streaming attention that only visits tiles whose mask bit is set.

    Rows keep a running max and running normaliser across key blocks, so no
    masked tile is ever materialised.
    """
    q, k, v, scale = _check_qkv(q, k, v, scale)
    h, s, d = q.shape
    bits = _check_mask(mask, h, s, block_n)
    out, lse, pairs = get_backend(backend).sparse_forward(q, k, v, bits, block_n, scale)
    if counter is not None:
        counter.add_pairs(int(pairs), block_n, d)
    return (out, lse) if return_lse else out


def attention_backward(
    q, k, v, dout, mask: BlockMask | None = None, block_n: int | None = None,
    scale=None, *, out=None, lse=None, backend=None,
) -> AttentionGrad:
    """Gradients of (masked) attention with respect to q, k and v.

    ``out`` and ``lse`` from the forward pass are reused when given, otherwise
    recomputed. With a mask, only active tiles contribute.
    """
    q, k, v, scale = _check_qkv(q, k, v, scale)
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != q.shape:
        raise GeometryError(f"dout shape {dout.shape} does not match output {q.shape}")
    h, s, _ = q.shape

    if mask is None:
        scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
        probs, _ = _softmax_rows(scores)
        if out is None:
            out = np.matmul(probs, v)
        dv = np.matmul(probs.transpose(0, 2, 1), dout)
        dp = np.matmul(dout, v.transpose(0, 2, 1))
        delta = np.einsum("hsd,hsd->hs", dout, out)
        ds = probs * (dp - delta[..., None]) * scale
        return AttentionGrad(np.matmul(ds, k), np.matmul(ds.transpose(0, 2, 1), q), dv)

    if block_n is None:
        raise GeometryError("block_n is required with a mask")
    bits = _check_mask(mask, h, s, block_n)
    kern = get_backend(backend)
    if out is None or lse is None:
        out, lse, _ = kern.sparse_forward(q, k, v, bits, block_n, scale)
    delta = np.einsum("hsd,hsd->hs", dout, out)
    dq, dk, dv, _ = kern.sparse_backward(
        q, k, v, bits, block_n, scale,
        np.ascontiguousarray(lse, dtype=np.float64), delta, np.ascontiguousarray(dout),
    )
    return AttentionGrad(dq, dk, dv)

"""Pure-numpy block-skipping kernels.

Same contract as the numba kernels. Each query block gets a lookup table of
its active key blocks (padded to the longest row); the kernels then stream
over LUT slots, vectorised across all heads and query blocks at once, so the
Python loop runs ``max(row popcount)`` times rather than once per tile.
"""

import numpy as np


def _lut(mask, h):
    # active columns first, ascending; padding slots flagged invalid
    kmax = int(mask.sum(axis=-1).max())
    order = np.argsort(mask == 0, axis=-1, kind="stable")[..., :kmax]
    valid = np.take_along_axis(mask, order, axis=-1).astype(bool)
    if mask.shape[0] == 1 and h > 1:
        order = np.broadcast_to(order, (h,) + order.shape[1:])
        valid = np.broadcast_to(valid, (h,) + valid.shape[1:])
    return order, valid, kmax


def sparse_forward(q, k, v, mask, block_n, scale):
    h, s, d = q.shape
    r = s // block_n
    qb = q.reshape(h, r, block_n, d)
    kb = k.reshape(h, r, block_n, d)
    vb = v.reshape(h, r, block_n, d)
    idx, valid, kmax = _lut(mask, h)
    hi = np.arange(h)[:, None]

    m = np.full((h, r, block_n), -np.inf)
    l = np.zeros((h, r, block_n))
    acc = np.zeros((h, r, block_n, d))
    for slot in range(kmax):
        cols = idx[..., slot]
        ok = valid[..., slot][..., None, None]
        kk = kb[hi, cols]
        vv = vb[hi, cols]
        sc = np.matmul(qb, kk.swapaxes(-1, -2)) * scale
        sc = np.where(ok, sc, -np.inf)
        m_new = np.maximum(m, sc.max(axis=-1))
        base = np.where(np.isfinite(m_new), m_new, 0.0)
        alpha = np.exp(m - base)
        p = np.exp(sc - base[..., None])
        l = l * alpha + p.sum(axis=-1)
        acc = acc * alpha[..., None] + np.matmul(p, vv)
        m = m_new
    out = (acc / l[..., None]).reshape(h, s, d)
    lse = (m + np.log(l)).reshape(h, s)
    return out, lse, int(valid.sum())


def sparse_backward(q, k, v, mask, block_n, scale, lse, delta, dout):
    h, s, d = q.shape
    r = s // block_n
    qb = q.reshape(h, r, block_n, d)
    kb = k.reshape(h, r, block_n, d)
    vb = v.reshape(h, r, block_n, d)
    ob = dout.reshape(h, r, block_n, d)
    lse_b = lse.reshape(h, r, block_n)
    del_b = delta.reshape(h, r, block_n)
    hi = np.arange(h)[:, None]

    idx, valid, kmax = _lut(mask, h)
    dq = np.zeros((h, r, block_n, d))
    for slot in range(kmax):
        cols = idx[..., slot]
        ok = valid[..., slot][..., None, None]
        kk = kb[hi, cols]
        vv = vb[hi, cols]
        sc = np.matmul(qb, kk.swapaxes(-1, -2)) * scale
        p = np.where(ok, np.exp(sc - lse_b[..., None]), 0.0)
        dp = np.matmul(ob, vv.swapaxes(-1, -2))
        ds = p * (dp - del_b[..., None]) * scale
        dq += np.matmul(ds, kk)
    visited = int(valid.sum())

    # key-major pass over the transposed mask
    idx, valid, kmax = _lut(np.ascontiguousarray(mask.transpose(0, 2, 1)), h)
    dk = np.zeros((h, r, block_n, d))
    dv = np.zeros((h, r, block_n, d))
    for slot in range(kmax):
        rows = idx[..., slot]
        ok = valid[..., slot][..., None, None]
        qq = qb[hi, rows]
        oo = ob[hi, rows]
        ll = lse_b[hi, rows]
        dd = del_b[hi, rows]
        # [h, key block, j, i]
        sc_t = np.matmul(kb, qq.swapaxes(-1, -2)) * scale
        p_t = np.where(ok, np.exp(sc_t - ll[..., None, :]), 0.0)
        dp_t = np.matmul(vb, oo.swapaxes(-1, -2))
        ds_t = p_t * (dp_t - dd[..., None, :]) * scale
        dv += np.matmul(p_t, oo)
        dk += np.matmul(ds_t, qq)
    return dq.reshape(h, s, d), dk.reshape(h, s, d), dv.reshape(h, s, d), visited

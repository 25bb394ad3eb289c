"""Block-skipping attention kernels compiled with numba.

Every kernel walks (head, block) tasks in a ``prange`` and touches only the
(query block, key block) tiles whose mask bit is set. Masks are
``uint8[hm, R, R]`` with ``hm`` either 1 (shared) or the head count.
"""

import math

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def sparse_forward(q, k, v, mask, block_n, scale):
    h, s, d = q.shape
    r = s // block_n
    hm = mask.shape[0]
    out = np.empty((h, s, d))
    lse = np.empty((h, s))
    visited = np.zeros(h * r, np.int64)
    for task in prange(h * r):
        hh = task // r
        qb = task % r
        mh = hh if hm > 1 else 0
        q0 = qb * block_n
        m_run = np.full(block_n, -np.inf)
        l_run = np.zeros(block_n)
        acc = np.zeros((block_n, d))
        sc = np.empty(block_n)
        for kb in range(r):
            if mask[mh, qb, kb] == 0:
                continue
            visited[task] += 1
            k0 = kb * block_n
            for i in range(block_n):
                row_max = -np.inf
                for j in range(block_n):
                    dot = 0.0
                    for c in range(d):
                        dot += q[hh, q0 + i, c] * k[hh, k0 + j, c]
                    dot *= scale
                    sc[j] = dot
                    if dot > row_max:
                        row_max = dot
                m_new = max(m_run[i], row_max)
                alpha = math.exp(m_run[i] - m_new)
                l_run[i] *= alpha
                for c in range(d):
                    acc[i, c] *= alpha
                for j in range(block_n):
                    p = math.exp(sc[j] - m_new)
                    l_run[i] += p
                    for c in range(d):
                        acc[i, c] += p * v[hh, k0 + j, c]
                m_run[i] = m_new
        for i in range(block_n):
            inv = 1.0 / l_run[i]
            for c in range(d):
                out[hh, q0 + i, c] = acc[i, c] * inv
            lse[hh, q0 + i] = m_run[i] + math.log(l_run[i])
    return out, lse, visited.sum()


@njit(parallel=True, cache=True)
def sparse_backward(q, k, v, mask, block_n, scale, lse, delta, dout):
    # delta[h, i] = sum_c dout[h, i, c] * out[h, i, c]
    h, s, d = q.shape
    r = s // block_n
    hm = mask.shape[0]
    dq = np.zeros((h, s, d))
    dk = np.zeros((h, s, d))
    dv = np.zeros((h, s, d))
    visited = np.zeros(h * r, np.int64)

    # pass 1: dq, one task per query block
    for task in prange(h * r):
        hh = task // r
        qb = task % r
        mh = hh if hm > 1 else 0
        q0 = qb * block_n
        for kb in range(r):
            if mask[mh, qb, kb] == 0:
                continue
            visited[task] += 1
            k0 = kb * block_n
            for i in range(block_n):
                for j in range(block_n):
                    dot = 0.0
                    dp = 0.0
                    for c in range(d):
                        dot += q[hh, q0 + i, c] * k[hh, k0 + j, c]
                        dp += dout[hh, q0 + i, c] * v[hh, k0 + j, c]
                    p = math.exp(dot * scale - lse[hh, q0 + i])
                    ds = p * (dp - delta[hh, q0 + i]) * scale
                    for c in range(d):
                        dq[hh, q0 + i, c] += ds * k[hh, k0 + j, c]

    # pass 2: dk and dv, one task per key block, no write conflicts
    for task in prange(h * r):
        hh = task // r
        kb = task % r
        mh = hh if hm > 1 else 0
        k0 = kb * block_n
        for qb in range(r):
            if mask[mh, qb, kb] == 0:
                continue
            q0 = qb * block_n
            for j in range(block_n):
                for i in range(block_n):
                    dot = 0.0
                    dp = 0.0
                    for c in range(d):
                        dot += q[hh, q0 + i, c] * k[hh, k0 + j, c]
                        dp += dout[hh, q0 + i, c] * v[hh, k0 + j, c]
                    p = math.exp(dot * scale - lse[hh, q0 + i])
                    ds = p * (dp - delta[hh, q0 + i]) * scale
                    for c in range(d):
                        dv[hh, k0 + j, c] += p * dout[hh, q0 + i, c]
                        dk[hh, k0 + j, c] += ds * q[hh, q0 + i, c]
    return dq, dk, dv, visited.sum()

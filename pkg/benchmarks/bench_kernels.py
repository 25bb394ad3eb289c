"""Time the block-sparse kernels per backend against dense attention.

    python3 benchmarks/bench_kernels.py --heads 4 --seq 2048 --dim 32 --block-n 64 --thr 0.4

Each backend runs once untimed first so JIT compilation (or cache loading)
is excluded. Prints one JSON line per (backend, stage).
"""

import argparse
import json
import time

import numpy as np

from nabla_attn import kernels
from nabla_attn.attention import attention_backward, block_sparse_attention, dense_attention
from nabla_attn.masks import NablaParams, nabla_mask, sparsity


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--seq", type=int, default=2048)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--block-n", type=int, default=64)
    ap.add_argument("--thr", type=float, default=0.4)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    shape = (args.heads, args.seq, args.dim)
    q, k, v, dout = (rng.standard_normal(shape) for _ in range(4))
    # smooth keys so the pooled attention is peaked, as in real video latents
    k += np.repeat(rng.standard_normal((args.heads, args.seq // args.block_n, args.dim)) * 2,
                   args.block_n, axis=1)
    mask = nabla_mask(q, k, NablaParams(args.thr, args.block_n))
    kernels.set_threads()

    def emit(**rec):
        print(json.dumps({"sparsity": round(sparsity(mask), 4), **rec}))

    emit(backend="dense", stage="forward",
         seconds=best_of(lambda: dense_attention(q, k, v), args.repeat))
    emit(backend="dense", stage="backward",
         seconds=best_of(lambda: attention_backward(q, k, v, dout), args.repeat))
    for name in sorted(kernels.BACKENDS):
        fwd = lambda: block_sparse_attention(q, k, v, mask, args.block_n, backend=name)  # noqa: E731
        bwd = lambda: attention_backward(q, k, v, dout, mask, args.block_n, backend=name)  # noqa: E731
        fwd()
        bwd()
        emit(backend=name, stage="forward", seconds=best_of(fwd, args.repeat))
        emit(backend=name, stage="backward", seconds=best_of(bwd, args.repeat))


if __name__ == "__main__":
    main()

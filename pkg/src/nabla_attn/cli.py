"""``nabla-attn`` command line.

Results go to stdout as one JSON object per line; diagnostics go to stderr.
Exit codes: 0 success, 1 validation/format/IO error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .attention import (
    FlopCounter,
    block_sparse_attention,
    dense_attention,
    masked_dense_attention,
)
from .errors import NablaError
from .layout import TokenGrid, apply_reorder, build_permutation
from .masks import (
    NablaParams,
    StaWindow,
    count_dense_blocks_eq5,
    export_mask_image,
    join_masks,
    load_mask,
    nabla_mask,
    save_mask,
    sparsity,
    sta_mask,
)
from .tensor_io import load_tensor, save_tensor

log = logging.getLogger("nabla_attn")

PROG = "nabla-attn"


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def _mask_summary(m) -> dict:
    return {
        "heads": m.heads,
        "rows": m.rows,
        "cols": m.cols,
        "popcount": m.popcount(),
        "sparsity": sparsity(m),
    }


def _heads3(x):
    # allow [S, D] inputs as a single head
    return x[None] if x.ndim == 2 else x


# -- subcommands --------------------------------------------------------------


def cmd_reorder(args):
    grid = TokenGrid.parse(args.grid)
    x = load_tensor(args.input)
    direction = "inverse" if args.inverse else "forward"
    y = apply_reorder(x, build_permutation(grid), direction, axis=args.axis)
    save_tensor(y, args.output)
    _emit({"cmd": "reorder", "direction": direction, "shape": list(y.shape), "out": args.output})


def cmd_mask_nabla(args):
    q = _heads3(load_tensor(args.q))
    k = _heads3(load_tensor(args.k))
    m = nabla_mask(q, k, NablaParams(args.thr, args.block_n, args.scale))
    save_mask(m, args.out)
    _emit({"cmd": "mask-nabla", "thr": args.thr, "block_n": args.block_n,
           **_mask_summary(m), "out": args.out})


def cmd_mask_sta(args):
    grid = TokenGrid.parse(args.grid)
    window = StaWindow.parse(args.window, grid)
    m = sta_mask(window)
    save_mask(m, args.out)
    _emit({"cmd": "mask-sta", **_mask_summary(m),
           "eq5_dense_blocks": count_dense_blocks_eq5(window), "out": args.out})


def cmd_mask_join(args):
    m = join_masks(load_mask(args.a), load_mask(args.b))
    save_mask(m, args.out)
    _emit({"cmd": "mask-join", **_mask_summary(m), "out": args.out})


def cmd_mask_stats(args):
    m = load_mask(args.mask)
    rec = {"cmd": "mask-stats", **_mask_summary(m)}
    if args.window or args.grid:
        if not (args.window and args.grid):
            raise _Usage("--window and --grid must be given together")
        window = StaWindow.parse(args.window, TokenGrid.parse(args.grid))
        rec["eq5_dense_blocks"] = count_dense_blocks_eq5(window)
    _emit(rec)


def cmd_mask_export_pgm(args):
    m = load_mask(args.mask)
    export_mask_image(m, args.head, args.out)
    _emit({"cmd": "mask-export-pgm", "head": args.head, "rows": m.rows, "out": args.out})


def cmd_attn(args):
    q = _heads3(load_tensor(args.q))
    k = _heads3(load_tensor(args.k))
    v = _heads3(load_tensor(args.v))
    counter = FlopCounter()
    rec = {"cmd": "attn", "mode": args.mode}
    if args.mode == "dense":
        out = dense_attention(q, k, v, args.scale, counter=counter)
        rec["sparsity"] = 0.0
    else:
        if args.mask is None or args.block_n is None:
            raise _Usage(f"--mode {args.mode} requires --mask and --block-n")
        m = load_mask(args.mask)
        rec["sparsity"] = sparsity(m)
        if args.mode == "masked":
            out = masked_dense_attention(q, k, v, m, args.block_n, args.scale)
            # masked-dense evaluates every score, then discards masked ones
            counter.add_pairs(q.shape[0] * m.rows * m.rows, args.block_n, q.shape[-1])
        else:
            out = block_sparse_attention(q, k, v, m, args.block_n, args.scale, counter=counter)
    rec.update(flops=counter.total, score_macs=counter.score_macs,
               value_macs=counter.value_macs, block_pairs=counter.block_pairs)
    if args.compare_dense:
        ref = dense_attention(q, k, v, args.scale)
        rec["max_abs_diff"] = float(np.abs(out - ref).max())
    save_tensor(out, args.out)
    rec["out"] = args.out
    _emit(rec)


def _toy_config(args):
    from .harness.config import ToyDiTConfig, config_from_mapping, load_config

    cfg = load_config(args.config) if args.config else ToyDiTConfig()
    flags = {
        "grid": args.grid, "attention_mode": args.mode, "train_steps": args.steps,
        "seed": args.seed, "batch": args.batch, "lr": args.lr,
    }
    return config_from_mapping({k: v for k, v in flags.items() if v is not None}, cfg)


def _run_summary(records):
    vals = [r.val_loss for r in records if r.val_loss is not None]
    return {
        "steps": len(records),
        "final_train_loss": records[-1].train_loss if records else None,
        "final_val_loss": vals[-1] if vals else None,
        "mean_step_seconds": float(np.mean([r.step_seconds for r in records])) if records else None,
        "mean_sparsity": float(np.mean([r.sparsity for r in records])) if records else None,
    }


def cmd_train_toy(args):
    from .harness import train, write_records_csv

    cfg = _toy_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("training %s for %d steps", cfg.attention_mode, cfg.train_steps)
    records = train(cfg, checkpoint=out_dir / "checkpoint")
    write_records_csv(records, out_dir / "losses.csv")
    _emit({"cmd": "train-toy", "mode": str(cfg.attention_mode), "seed": cfg.seed,
           **_run_summary(records), "csv": str(out_dir / "losses.csv"),
           "checkpoint": str(out_dir / "checkpoint")})


def cmd_distill_toy(args):
    from .harness import distill, write_records_csv

    cfg = _toy_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = distill(args.student_mode, cfg, args.teacher, teacher_mode=args.teacher_mode)
    write_records_csv(records, out_dir / "distill.csv")
    _emit({"cmd": "distill-toy", "student_mode": args.student_mode,
           "teacher_mode": args.teacher_mode, "step0_loss": records[0].train_loss if records else None,
           **_run_summary(records), "csv": str(out_dir / "distill.csv")})


# -- parser -------------------------------------------------------------------


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Block-sparse attention masks, kernels and a toy training harness.",
        allow_abbrev=False,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("reorder", cmd_reorder, "reorder tokens between raster and patch-grouped order")
    p.add_argument("input", help="input .ntsr")
    p.add_argument("output", help="output .ntsr")
    p.add_argument("--grid", required=True, metavar="T,H,W,P", help="latent grid and patch size")
    p.add_argument("--inverse", action="store_true", help="apply the inverse permutation")
    p.add_argument("--axis", type=int, default=0, help="token axis (default 0)")

    p = add("mask-nabla", cmd_mask_nabla, "adaptive mask from queries and keys")
    p.add_argument("--q", required=True, metavar="PATH", help="queries .ntsr [h,S,D]")
    p.add_argument("--k", required=True, metavar="PATH", help="keys .ntsr [h,S,D]")
    p.add_argument("--thr", required=True, type=float, help="retained probability mass in [0,1]")
    p.add_argument("--block-n", required=True, type=int, help="tokens per block")
    p.add_argument("--scale", type=float, default=None, help="score scale (default 1/sqrt(D))")
    p.add_argument("--out", required=True, metavar="PATH", help="output .nmsk")

    p = add("mask-sta", cmd_mask_sta, "sliding-tile window mask")
    p.add_argument("--window", required=True, metavar="WT,WH,WW", help="odd window extents in blocks")
    p.add_argument("--grid", required=True, metavar="T,H,W,P", help="latent grid and patch size")
    p.add_argument("--out", required=True, metavar="PATH", help="output .nmsk")

    p = add("mask-join", cmd_mask_join, "elementwise OR of two masks")
    p.add_argument("a", help="first .nmsk")
    p.add_argument("b", help="second .nmsk")
    p.add_argument("--out", required=True, metavar="PATH", help="output .nmsk")

    p = add("mask-stats", cmd_mask_stats, "popcount, sparsity and dense-block count of a mask")
    p.add_argument("mask", help="input .nmsk")
    p.add_argument("--window", metavar="WT,WH,WW", help="also report the closed-form STA count")
    p.add_argument("--grid", metavar="T,H,W,P", help="grid for --window")

    p = add("mask-export-pgm", cmd_mask_export_pgm, "write one head of a mask as a PGM image")
    p.add_argument("mask", help="input .nmsk")
    p.add_argument("--head", type=int, default=0, help="head index (default 0)")
    p.add_argument("--out", required=True, metavar="PATH", help="output .pgm")

    p = add("attn", cmd_attn, "run dense, masked or block-sparse attention")
    p.add_argument("--mode", required=True, choices=("dense", "masked", "sparse"))
    p.add_argument("--q", required=True, metavar="PATH", help="queries .ntsr [h,S,D]")
    p.add_argument("--k", required=True, metavar="PATH", help="keys .ntsr [h,S,D]")
    p.add_argument("--v", required=True, metavar="PATH", help="values .ntsr [h,S,D]")
    p.add_argument("--mask", metavar="PATH", help="block mask .nmsk (masked/sparse)")
    p.add_argument("--block-n", type=int, help="tokens per block (masked/sparse)")
    p.add_argument("--scale", type=float, default=None, help="score scale (default 1/sqrt(D))")
    p.add_argument("--compare-dense", action="store_true", help="report max abs diff against dense")
    p.add_argument("--out", required=True, metavar="PATH", help="output .ntsr")

    for name, func, help_ in (
        ("train-toy", cmd_train_toy, "train the toy denoiser and write a loss CSV and checkpoint"),
        ("distill-toy", cmd_distill_toy, "distil a sparse-attention student from a toy checkpoint"),
    ):
        p = add(name, func, help_)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--mode", metavar="MODE", help="full | nabla(thr) | nabla(thr)+sta(wt,wh,ww)")
        p.add_argument("--grid", metavar="T,H,W,P", help="latent grid and patch size")
        p.add_argument("--steps", type=int, help="training steps")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--batch", type=int, help="batch size")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--out-dir", default=".", metavar="DIR", help="output directory")
        if name == "distill-toy":
            p.add_argument("--teacher", required=True, metavar="DIR", help="teacher checkpoint directory")
            p.add_argument("--student-mode", required=True, metavar="MODE", help="student attention mode")
            p.add_argument("--teacher-mode", default="full", metavar="MODE", help="teacher attention mode")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    kernels.set_threads()
    try:
        args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except NablaError as exc:
        print(f"{PROG}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

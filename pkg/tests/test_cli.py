import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from nabla_attn.attention import block_sparse_attention
from nabla_attn.cli import build_parser, run
from nabla_attn.layout import TokenGrid, build_permutation
from nabla_attn.masks import (
    BlockMask,
    NablaParams,
    StaWindow,
    join_masks,
    load_mask,
    nabla_mask,
    save_mask,
    sta_mask,
)
from nabla_attn.tensor_io import load_tensor, save_tensor

HELP = Path(__file__).parent / "data" / "help"
COMMANDS = ("reorder", "mask-nabla", "mask-sta", "mask-join", "mask-stats", "mask-export-pgm",
            "attn", "train-toy", "distill-toy")


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [json.loads(line) for line in out.splitlines()]
    return code, (lines[-1] if lines else None), err


@pytest.fixture
def qkv_files(tmp_path, rng):
    paths = []
    for name in "qkv":
        p = tmp_path / f"{name}.ntsr"
        save_tensor(rng.standard_normal((2, 64, 4)), p)
        paths.append(p)
    return paths


def test_reorder_roundtrip(tmp_path, capsys, rng):
    grid = "2,4,4,2"
    x = rng.standard_normal((32, 3)).astype(np.float32)
    save_tensor(x, tmp_path / "x.ntsr")
    code, rec, _ = call(capsys, "reorder", tmp_path / "x.ntsr", tmp_path / "y.ntsr", "--grid", grid)
    assert code == 0 and rec["shape"] == [32, 3]
    y = load_tensor(tmp_path / "y.ntsr")
    assert np.array_equal(y, x[build_permutation(TokenGrid.parse(grid)).forward])
    code, _, _ = call(capsys, "reorder", tmp_path / "y.ntsr", tmp_path / "z.ntsr", "--grid", grid,
                      "--inverse")
    assert code == 0
    assert (tmp_path / "z.ntsr").read_bytes() == (tmp_path / "x.ntsr").read_bytes()


def test_reorder_wrong_length(tmp_path, capsys):
    save_tensor(np.zeros((31, 2)), tmp_path / "x.ntsr")
    code, rec, err = call(capsys, "reorder", tmp_path / "x.ntsr", tmp_path / "y.ntsr",
                          "--grid", "2,4,4,2")
    assert code == 1 and rec is None and "GeometryError" in err
    assert not (tmp_path / "y.ntsr").exists()


def test_mask_sta_matches_closed_form(tmp_path, capsys):
    code, rec, _ = call(capsys, "mask-sta", "--window", "1,1,1", "--grid", "4,8,8,2",
                        "--out", tmp_path / "s.nmsk")
    assert code == 0
    assert rec["popcount"] == 64 == rec["eq5_dense_blocks"]
    assert load_mask(tmp_path / "s.nmsk") == BlockMask.identity(64)


def test_mask_stats_full(tmp_path, capsys):
    save_mask(BlockMask.full(5, heads=2), tmp_path / "f.nmsk")
    code, rec, _ = call(capsys, "mask-stats", tmp_path / "f.nmsk")
    assert code == 0 and rec["sparsity"] == 0.0 and rec["popcount"] == 50
    run(["mask-stats", str(tmp_path / "f.nmsk")])
    assert '"sparsity":0.0' in capsys.readouterr().out


def test_mask_stats_window(tmp_path, capsys):
    save_mask(sta_mask(StaWindow(1, 3, 3, TokenGrid(2, 8, 8, 2))), tmp_path / "s.nmsk")
    code, rec, _ = call(capsys, "mask-stats", tmp_path / "s.nmsk", "--window", "1,3,3",
                        "--grid", "2,8,8,2")
    assert code == 0 and rec["eq5_dense_blocks"] == 9 * 32 == rec["popcount"]
    code, _, _ = call(capsys, "mask-stats", tmp_path / "s.nmsk", "--window", "1,3,3")
    assert code == 2


def test_mask_join_and_pgm(tmp_path, capsys):
    save_mask(BlockMask.identity(3), tmp_path / "a.nmsk")
    bits = np.zeros((1, 3, 3), bool)
    bits[0, :, 2] = True
    save_mask(BlockMask(bits), tmp_path / "b.nmsk")
    code, rec, _ = call(capsys, "mask-join", tmp_path / "a.nmsk", tmp_path / "b.nmsk",
                        "--out", tmp_path / "j.nmsk")
    assert code == 0 and rec["popcount"] == 5
    code, _, _ = call(capsys, "mask-export-pgm", tmp_path / "j.nmsk", "--out", tmp_path / "j.pgm")
    assert code == 0
    assert (tmp_path / "j.pgm").read_bytes() == (
        b"P5\n3 3\n255\n" + bytes([255, 0, 255, 0, 255, 255, 0, 0, 255]))
    code, _, err = call(capsys, "mask-export-pgm", tmp_path / "j.nmsk", "--head", 1,
                        "--out", tmp_path / "k.pgm")
    assert code == 1 and "ParamError" in err


def test_mask_join_mismatch(tmp_path, capsys):
    save_mask(BlockMask.identity(3), tmp_path / "a.nmsk")
    save_mask(BlockMask.identity(4), tmp_path / "b.nmsk")
    code, _, _ = call(capsys, "mask-join", tmp_path / "a.nmsk", tmp_path / "b.nmsk",
                      "--out", tmp_path / "j.nmsk")
    assert code == 1


def test_attn_sparse_full_mask_matches_dense(tmp_path, capsys, qkv_files):
    q, k, v = qkv_files
    save_mask(BlockMask.full(8), tmp_path / "f.nmsk")
    code, rec, _ = call(capsys, "attn", "--mode", "sparse", "--q", q, "--k", k, "--v", v,
                        "--mask", tmp_path / "f.nmsk", "--block-n", 8, "--compare-dense",
                        "--out", tmp_path / "o.ntsr")
    assert code == 0 and rec["max_abs_diff"] <= 1e-6
    assert rec["block_pairs"] == 2 * 64 and rec["sparsity"] == 0.0


def test_attn_modes_flops(tmp_path, capsys, qkv_files):
    q, k, v = qkv_files
    save_mask(BlockMask.identity(8), tmp_path / "i.nmsk")
    recs = {}
    for mode in ("dense", "masked", "sparse"):
        code, recs[mode], _ = call(capsys, "attn", "--mode", mode, "--q", q, "--k", k, "--v", v,
                                   "--mask", tmp_path / "i.nmsk", "--block-n", 8,
                                   "--out", tmp_path / f"{mode}.ntsr")
        assert code == 0
    assert recs["dense"]["score_macs"] == recs["masked"]["score_macs"] == 2 * 64 * 64 * 4
    assert recs["sparse"]["score_macs"] == 2 * 8 * 8 * 8 * 4
    masked = load_tensor(tmp_path / "masked.ntsr")
    assert np.abs(masked - load_tensor(tmp_path / "sparse.ntsr")).max() <= 1e-6


def test_attn_usage_errors(tmp_path, capsys, qkv_files):
    q, k, v = qkv_files
    code, _, _ = call(capsys, "attn", "--mode", "sparse", "--q", q, "--k", k, "--v", v,
                      "--out", tmp_path / "o.ntsr")
    assert code == 2
    code, _, _ = call(capsys, "attn", "--mode", "bogus", "--q", q, "--k", k, "--v", v,
                      "--out", tmp_path / "o.ntsr")
    assert code == 2
    code, _, err = call(capsys, "attn", "--mode", "dense", "--q", q, "--k", k,
                        "--v", tmp_path / "missing.ntsr", "--out", tmp_path / "o.ntsr")
    assert code == 1 and "IoError" in err


def test_bad_inputs_exit_one(tmp_path, capsys):
    (tmp_path / "junk.nmsk").write_bytes(b"JUNKJUNKJUNK")
    assert call(capsys, "mask-stats", tmp_path / "junk.nmsk")[0] == 1
    assert call(capsys, "mask-sta", "--window", "2,1,1", "--grid", "4,8,8,2",
                "--out", tmp_path / "s.nmsk")[0] == 1
    assert call(capsys, "mask-sta", "--window", "1,1", "--grid", "4,8,8,2",
                "--out", tmp_path / "s.nmsk")[0] == 1
    assert call(capsys, "reorder", "a", "b", "--grid", "4,7,8,2")[0] == 1


def test_usage_exit_two(capsys):
    assert run([]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["mask-sta", "--win", "1,1,1"]) == 2
    capsys.readouterr()


def test_pipeline_matches_in_process(tmp_path, capsys, rng):
    grid = TokenGrid(2, 8, 8, 2)
    q, k, v = (rng.standard_normal((2, grid.seq_len, 4)).astype(np.float32) for _ in range(3))
    for name, x in zip("qkv", (q, k, v)):
        save_tensor(x, tmp_path / f"{name}.ntsr")
    p = lambda n: tmp_path / n  # noqa: E731
    assert call(capsys, "mask-nabla", "--q", p("q.ntsr"), "--k", p("k.ntsr"), "--thr", 0.6,
                "--block-n", grid.block_n, "--out", p("n.nmsk"))[0] == 0
    assert call(capsys, "mask-sta", "--window", "1,1,1", "--grid", "2,8,8,2",
                "--out", p("s.nmsk"))[0] == 0
    assert call(capsys, "mask-join", p("n.nmsk"), p("s.nmsk"), "--out", p("j.nmsk"))[0] == 0
    assert call(capsys, "attn", "--mode", "sparse", "--q", p("q.ntsr"), "--k", p("k.ntsr"),
                "--v", p("v.ntsr"), "--mask", p("j.nmsk"), "--block-n", grid.block_n,
                "--out", p("o.ntsr"))[0] == 0

    mask = join_masks(nabla_mask(q, k, NablaParams(0.6, grid.block_n)),
                      sta_mask(StaWindow(1, 1, 1, grid)))
    assert load_mask(p("j.nmsk")) == mask
    ref = block_sparse_attention(q, k, v, mask, grid.block_n).astype(np.float32)
    assert np.array_equal(load_tensor(p("o.ntsr")), ref)


def test_train_and_distill(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("grid = 2,4,4,2\nchannels = 2\ndim = 4\nbatch = 2\n"
                   "train_samples = 8\nval_samples = 4\nval_every = 2\n")
    code, rec, _ = call(capsys, "train-toy", "--config", cfg, "--steps", 4, "--mode", "full",
                        "--out-dir", tmp_path / "run")
    assert code == 0 and rec["steps"] == 4 and rec["final_val_loss"] is not None
    rows = list(csv.reader((tmp_path / "run" / "losses.csv").open()))
    assert rows[0] == ["step", "train_loss", "val_loss", "step_seconds", "sparsity"] and len(rows) == 5

    code, rec, _ = call(capsys, "distill-toy", "--config", cfg, "--steps", 2,
                        "--teacher", tmp_path / "run" / "checkpoint", "--student-mode", "nabla(1.0)",
                        "--out-dir", tmp_path / "d")
    assert code == 0 and rec["step0_loss"] == 0.0
    code, _, err = call(capsys, "distill-toy", "--teacher", tmp_path / "nowhere",
                        "--student-mode", "nabla(0.4)", "--out-dir", tmp_path / "d")
    assert code == 1 and "IoError" in err
    assert call(capsys, "train-toy", "--mode", "nabla(2)", "--out-dir", tmp_path / "x")[0] == 1


def test_threads_env(tmp_path, qkv_files):
    q, k, v = qkv_files
    env = {**os.environ, "NABLA_THREADS": "1"}
    res = subprocess.run(
        [sys.executable, "-m", "nabla_attn.cli", "attn", "--mode", "dense", "--q", str(q),
         "--k", str(k), "--v", str(v), "--out", str(tmp_path / "o.ntsr")],
        env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["cmd"] == "attn"


# -- help text ---------------------------------------------------------------------


def _help(command=None):
    parser = build_parser()
    if command is None:
        return parser.format_help()
    sub = next(a for a in parser._actions if a.dest == "command")
    return sub.choices[command].format_help()


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help_golden(monkeypatch, command):
    monkeypatch.setenv("COLUMNS", "100")
    text = _help(command)
    path = HELP / f"{command or 'main'}.txt"
    if os.environ.get("NABLA_UPDATE_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(text)
    assert text == path.read_text()


def test_help_exits_zero(capsys):
    for command in COMMANDS:
        assert run([command, "--help"]) == 0
    assert "usage: nabla-attn" in capsys.readouterr().out

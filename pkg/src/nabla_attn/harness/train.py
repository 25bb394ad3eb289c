"""Denoising training, self-distillation, checkpoints and loss-curve CSVs."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DivergenceError, FormatError, IoError, ParamError, ValidationError
from ..tensor_io import load_tensor, save_tensor
from .config import AttentionMode, ToyDiTConfig, config_from_mapping
from .data import synth_dataset
from .model import ToyDiT

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "train_loss", "val_loss", "step_seconds", "sparsity")
MANIFEST = "manifest.json"


@dataclass
class RunRecord:
    step: int
    train_loss: float
    val_loss: float | None
    step_seconds: float
    sparsity: float


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.95, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _split(config, data):
    if data is None:
        data = synth_dataset(
            config.grid, config.train_samples + config.val_samples, config.seed, config.channels
        )
        return np.stack(data[: config.train_samples]), np.stack(data[config.train_samples:])
    data = np.stack([np.asarray(d, dtype=np.float64) for d in data])
    if len(data) < 2:
        raise ParamError("need at least two samples (train and validation)")
    n_val = max(1, min(config.val_samples, len(data) // 4))
    return data[:-n_val], data[-n_val:]


def _corrupt(x0, rng):
    # linear interpolation towards Gaussian noise at a uniform level t per sample
    noise = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=x0.shape[0])
    tt = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - tt) * x0 + tt * noise, t, noise


def _mse(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _mean_sparsity(model):
    sp = model.last_stats["sparsity"]
    return float(np.mean(sp)) if sp else 0.0


def _forward(model, x, t, step):
    # non-finite activations surface as validation errors inside attention
    try:
        return model.forward(x, t)
    except ValidationError as exc:
        raise DivergenceError(step) from exc


def run_training(config: ToyDiTConfig, data=None):
    """Train a fresh model; returns (model, records)."""
    rng = np.random.default_rng(config.seed)
    train_x, val_x = _split(config, data)
    model = ToyDiT.initialise(config, rng)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    val_in, val_t, val_noise = _corrupt(val_x, rng)

    records = []
    for step in range(config.train_steps):
        idx = rng.integers(0, len(train_x), size=config.batch)
        xt, t, noise = _corrupt(train_x[idx], rng)
        start = time.perf_counter()
        pred, cache = _forward(model, xt, t, step)
        loss, dpred = _mse(pred, noise)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        opt.step(model.params, model.backward(cache, dpred))
        elapsed = time.perf_counter() - start
        sp = _mean_sparsity(model)

        val = None
        if (step + 1) % config.val_every == 0 or step == config.train_steps - 1:
            vpred, _ = _forward(model, val_in, val_t, step)
            val, _ = _mse(vpred, val_noise)
            if not np.isfinite(val):
                raise DivergenceError(step)
            log.info("step %d train %.5f val %.5f", step, loss, val)
        records.append(RunRecord(step, loss, val, max(elapsed, 1e-9), sp))
    return model, records


def train(config: ToyDiTConfig, data=None, checkpoint=None) -> list[RunRecord]:
    model, records = run_training(config, data)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return records


def distill(student_mode, config: ToyDiTConfig, teacher_dir, data=None,
            teacher_mode="full") -> list[RunRecord]:
    """Fit a sparse-attention student to a frozen teacher's outputs.

    Both networks start from the weights in ``teacher_dir``; only the
    student's attention mode differs.
    """
    if isinstance(student_mode, str):
        student_mode = AttentionMode.parse(student_mode)
    if isinstance(teacher_mode, str):
        teacher_mode = AttentionMode.parse(teacher_mode)
    base = load_checkpoint(teacher_dir)
    arch = base.config
    config = config.replace(
        grid=arch.grid, channels=arch.channels, depth=arch.depth, heads=arch.heads,
        dim=arch.dim, mlp_ratio=arch.mlp_ratio, reorder=arch.reorder,
    )
    teacher = ToyDiT(config.replace(attention_mode=teacher_mode), base.params)
    student = ToyDiT(
        config.replace(attention_mode=student_mode),
        {k: v.copy() for k, v in base.params.items()},
    )

    rng = np.random.default_rng(config.seed)
    train_x, val_x = _split(config, data)
    opt = Adam(student.params, config.lr, config.beta1, config.beta2, config.eps)
    val_in, val_t, _ = _corrupt(val_x, rng)
    val_target, _ = teacher.forward(val_in, val_t)

    records = []
    for step in range(config.train_steps):
        idx = rng.integers(0, len(train_x), size=config.batch)
        xt, t, _ = _corrupt(train_x[idx], rng)
        target, _ = _forward(teacher, xt, t, step)
        start = time.perf_counter()
        pred, cache = _forward(student, xt, t, step)
        loss, dpred = _mse(pred, target)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        opt.step(student.params, student.backward(cache, dpred))
        elapsed = time.perf_counter() - start
        sp = _mean_sparsity(student)

        val = None
        if (step + 1) % config.val_every == 0 or step == config.train_steps - 1:
            vpred, _ = _forward(student, val_in, val_t, step)
            val, _ = _mse(vpred, val_target)
            if not np.isfinite(val):
                raise DivergenceError(step)
        records.append(RunRecord(step, loss, val, max(elapsed, 1e-9), sp))
    return records


# -- persistence --------------------------------------------------------------


def save_checkpoint(model: ToyDiT, directory) -> None:
    """One ``.ntsr`` per parameter plus ``manifest.json`` (config and name -> file)."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {d}: {exc.strerror}") from exc
    files = {}
    for name, value in sorted(model.params.items()):
        fname = name + ".ntsr"
        save_tensor(value, d / fname)
        files[name] = fname
    manifest = {"format": "nabla-toy-dit", "version": 1,
                "config": model.config.to_dict(), "params": files}
    try:
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest in {d}: {exc.strerror}") from exc


def load_checkpoint(directory) -> ToyDiT:
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        raise IoError(f"no checkpoint manifest at {os.fspath(path)}")
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("format") != "nabla-toy-dit":
        raise FormatError(f"{path} is not a toy DiT checkpoint")
    config = config_from_mapping(manifest["config"])
    params = {
        name: load_tensor(d / fname).astype(np.float64)
        for name, fname in manifest["params"].items()
    }
    return ToyDiT(config, params)


def write_records_csv(records, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([
                    r.step, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss),
                    f"{r.step_seconds:.6f}", repr(r.sparsity),
                ])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc

"""Synthetic smooth "videos" for the toy denoiser."""

from __future__ import annotations

import numpy as np

from ..errors import ParamError
from ..layout import TokenGrid


def synth_dataset(grid: TokenGrid, count: int, seed: int, channels: int = 4,
                  waves: int = 3) -> list[np.ndarray]:
    """``count`` float32 fields of shape [T, H, W, channels].

    Each channel is a sum of ``waves`` low-frequency plane waves with random
    phases, amplitudes and at most two cycles per axis, so neighbouring
    tokens are strongly correlated in space and time.
    """
    if count < 1:
        raise ParamError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    t = np.arange(grid.t_frames)[:, None, None] / grid.t_frames
    y = np.arange(grid.height)[None, :, None] / grid.height
    x = np.arange(grid.width)[None, None, :] / grid.width
    out = []
    for _ in range(count):
        sample = np.zeros((grid.t_frames, grid.height, grid.width, channels))
        for c in range(channels):
            for _ in range(waves):
                ft = rng.integers(0, 2)
                fy, fx = rng.integers(0, 3, size=2)
                if fy == 0 and fx == 0:
                    fx = 1
                amp = rng.uniform(0.2, 0.6)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                sample[..., c] += amp * np.sin(2.0 * np.pi * (ft * t + fy * y + fx * x) + phase)
        out.append(sample.astype(np.float32))
    return out

"""Patch-grouped token ordering for spatio-temporal latents.

Raster order walks a latent video as (frame, row, col). The reordered
("fractal-flattened") sequence keeps frames outermost, then visits P x P
patches in row-major order, then the tokens inside each patch in row-major
order. Every run of ``N = P*P`` consecutive reordered tokens is therefore one
patch of one frame, which is what block pooling in :mod:`nabla_attn.masks`
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class TokenGrid:
    t_frames: int
    height: int
    width: int
    patch: int

    def __post_init__(self):
        for name in ("t_frames", "height", "width", "patch"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise GeometryError(f"{name} must be a positive integer, got {v}")
        if self.height % self.patch or self.width % self.patch:
            raise GeometryError(
                f"height {self.height} and width {self.width} must be divisible "
                f"by patch {self.patch}"
            )

    @property
    def seq_len(self) -> int:
        return self.t_frames * self.height * self.width

    @property
    def block_n(self) -> int:
        return self.patch * self.patch

    @property
    def block_shape(self) -> tuple[int, int, int]:
        """Grid extents in blocks: (frames, patch rows, patch cols)."""
        return (self.t_frames, self.height // self.patch, self.width // self.patch)

    @property
    def num_blocks(self) -> int:
        return self.seq_len // self.block_n

    @classmethod
    def parse(cls, text: str) -> "TokenGrid":
        """Parse ``"T,H,W,P"``."""
        try:
            t, h, w, p = (int(s) for s in text.split(","))
        except ValueError:
            raise GeometryError(f"grid must be T,H,W,P, got {text!r}") from None
        return cls(t, h, w, p)


@dataclass(frozen=True)
class Permutation:
    forward: np.ndarray
    inverse: np.ndarray

    def __len__(self):
        return len(self.forward)


@lru_cache(maxsize=64)
def build_permutation(grid: TokenGrid) -> Permutation:
    """Return the raster -> patch-grouped permutation for ``grid``.

    ``forward[i]`` is the raster index of the token placed at position ``i``.
    Results are cached per grid and their arrays are read-only.
    """
    t, hb, wb = grid.block_shape
    p = grid.patch
    raster = np.arange(grid.seq_len, dtype=np.int64).reshape(t, hb, p, wb, p)
    forward = raster.transpose(0, 1, 3, 2, 4).reshape(-1).copy()
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(forward.size, dtype=np.int64)
    forward.flags.writeable = False
    inverse.flags.writeable = False
    return Permutation(forward, inverse)


def apply_reorder(x, perm: Permutation, direction: str = "forward", axis: int = 0):
    """Gather tokens of ``x`` along ``axis`` with the forward or inverse map.

    Returns a new array; ``x`` is never modified.
    """
    x = np.asarray(x)
    if direction == "forward":
        idx = perm.forward
    elif direction == "inverse":
        idx = perm.inverse
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if not -x.ndim <= axis < x.ndim:
        raise GeometryError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] != len(idx):
        raise GeometryError(
            f"token axis has length {x.shape[axis]}, permutation has {len(idx)}"
        )
    return np.take(x, idx, axis=axis)


def token_coords(grid: TokenGrid) -> np.ndarray:
    """(frame, row, col) of every raster token, shape [S, 3]."""
    t, r, c = np.unravel_index(np.arange(grid.seq_len), (grid.t_frames, grid.height, grid.width))
    return np.stack([t, r, c], axis=1)

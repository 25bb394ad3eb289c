"""A small pre-norm DiT-style noise predictor in numpy with manual backprop.

Tokens are the latent pixels of a [T, H, W, C] video. They are reordered
into patch-grouped order on the way in and restored on the way out, so
every attention block sees contiguous P x P patches as its sequence blocks.
"""

from __future__ import annotations

import math

import numpy as np

from ..attention import FlopCounter, attention_backward, block_sparse_attention, dense_attention
from ..layout import apply_reorder, build_permutation, token_coords
from ..masks import NablaParams, StaWindow, join_masks, nabla_mask, sparsity, sta_mask
from .config import ToyDiTConfig

TIME_FREQS = 8
POS_FREQS = 3
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def time_features(t):
    """[B] in [0, 1] -> [B, 2 * TIME_FREQS] sinusoidal features."""
    ang = np.asarray(t, dtype=np.float64)[:, None] * (math.pi * 2.0 ** np.arange(TIME_FREQS))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def position_features(grid) -> np.ndarray:
    """Raster-ordered sinusoidal features of (frame, row, col), [S, 6 * POS_FREQS]."""
    coords = token_coords(grid).astype(np.float64)
    coords /= np.array([grid.t_frames, grid.height, grid.width], dtype=np.float64)
    ang = coords[:, :, None] * (math.pi * 2.0 ** np.arange(POS_FREQS))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(grid.seq_len, -1)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    w = dy.shape[-1]
    dg = (dy * xhat).reshape(-1, w).sum(axis=0)
    db = dy.reshape(-1, w).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def gelu(u):
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    th = np.tanh(inner)
    return 0.5 * u * (1.0 + th), th


def gelu_backward(dy, u, th):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner)


def _wgrad(a, dy):
    return a.reshape(-1, a.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def init_params(config: ToyDiTConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w = config.width
    hid = w * config.mlp_ratio
    c = config.channels

    def lin(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in))

    p = {
        "embed.w": lin(c, w),
        "embed.b": np.zeros(w),
        "pos.w": lin(6 * POS_FREQS, w),
        "time.w": lin(2 * TIME_FREQS, w),
    }
    for layer in range(config.depth):
        pre = f"blocks.{layer}."
        p[pre + "ln1.g"] = np.ones(w)
        p[pre + "ln1.b"] = np.zeros(w)
        p[pre + "qkv.w"] = lin(w, 3 * w)
        p[pre + "proj.w"] = lin(w, w, 0.5)
        p[pre + "proj.b"] = np.zeros(w)
        p[pre + "ln2.g"] = np.ones(w)
        p[pre + "ln2.b"] = np.zeros(w)
        p[pre + "fc1.w"] = lin(w, hid)
        p[pre + "fc1.b"] = np.zeros(hid)
        p[pre + "fc2.w"] = lin(hid, w, 0.5)
        p[pre + "fc2.b"] = np.zeros(w)
    p["final.ln.g"] = np.ones(w)
    p["final.ln.b"] = np.zeros(w)
    p["out.w"] = lin(w, c, 0.1)
    p["out.b"] = np.zeros(c)
    return p


class ToyDiT:
    def __init__(self, config: ToyDiTConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        grid = config.grid
        self.perm = build_permutation(grid)
        pos = position_features(grid)
        self.pos = apply_reorder(pos, self.perm) if config.reorder else pos
        mode = config.attention_mode
        self.sta = None
        if mode.kind == "nabla" and mode.sta is not None:
            self.sta = sta_mask(StaWindow(*mode.sta, grid))

    @classmethod
    def initialise(cls, config: ToyDiTConfig, rng: np.random.Generator) -> "ToyDiT":
        return cls(config, init_params(config, rng))

    def with_mode(self, mode) -> "ToyDiT":
        """Same weights (copied), different attention mode."""
        cfg = self.config.replace(attention_mode=mode)
        return ToyDiT(cfg, {k: v.copy() for k, v in self.params.items()})

    # -- attention dispatch ---------------------------------------------------

    def _attend(self, q, k, v, stats, counter):
        mode = self.config.attention_mode
        n = self.config.grid.block_n
        if mode.kind == "identity":
            return v, None
        mask = None
        if mode.kind == "nabla":
            m = nabla_mask(q, k, NablaParams(mode.thr, n))
            stats["nabla_popcount"].append(m.popcount())
            if counter is not None:
                hq, s, d = q.shape
                r = s // n
                counter.mask_macs += hq * (r * r * d + 2 * s * d)
            if self.sta is not None:
                m = join_masks(m, self.sta)
            stats["sparsity"].append(sparsity(m))
            # an all-true mask is full attention; take the dense path
            if not m.is_full():
                mask = m
        else:
            stats["sparsity"].append(0.0)
        if mask is None:
            out, lse = dense_attention(q, k, v, counter=counter, return_lse=True)
        else:
            out, lse = block_sparse_attention(q, k, v, mask, n, counter=counter, return_lse=True)
        return out, (q, k, v, out, lse, mask)

    def _attend_backward(self, dout, cache, v_shape):
        if cache is None:
            return np.zeros(v_shape), np.zeros(v_shape), dout
        q, k, v, out, lse, mask = cache
        g = attention_backward(
            q, k, v, dout, mask, self.config.grid.block_n, out=out, lse=lse
        )
        return g.dq, g.dk, g.dv

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, t, counter: FlopCounter | None = None):
        """x: [B, T, H, W, C] raster videos, t: [B]. Returns (prediction, cache)."""
        cfg = self.config
        p = self.params
        b = x.shape[0]
        s = cfg.grid.seq_len
        nh, hd, w = cfg.heads, cfg.dim, cfg.width

        tok = np.asarray(x, dtype=np.float64).reshape(b, s, cfg.channels)
        if cfg.reorder:
            tok = apply_reorder(tok, self.perm, axis=1)
        tf = time_features(t)
        h = tok @ p["embed.w"] + p["embed.b"] + self.pos @ p["pos.w"] + (tf @ p["time.w"])[:, None]

        stats = {"sparsity": [], "nabla_popcount": []}
        blocks = []
        for layer in range(cfg.depth):
            pre = f"blocks.{layer}."
            a, ln1 = layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            qkv = a @ p[pre + "qkv.w"]
            heads = qkv.reshape(b, s, 3, nh, hd).transpose(2, 0, 3, 1, 4).reshape(3, b * nh, s, hd)
            o, att = self._attend(heads[0], heads[1], heads[2], stats, counter)
            om = o.reshape(b, nh, s, hd).transpose(0, 2, 1, 3).reshape(b, s, w)
            h = h + om @ p[pre + "proj.w"] + p[pre + "proj.b"]
            a2, ln2 = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = a2 @ p[pre + "fc1.w"] + p[pre + "fc1.b"]
            gu, th = gelu(u)
            h = h + gu @ p[pre + "fc2.w"] + p[pre + "fc2.b"]
            blocks.append((a, ln1, att, om, a2, ln2, u, gu, th))

        hf, lnf = layer_norm(h, p["final.ln.g"], p["final.ln.b"])
        y = hf @ p["out.w"] + p["out.b"]
        if cfg.reorder:
            y = apply_reorder(y, self.perm, "inverse", axis=1)
        y = y.reshape(x.shape)
        cache = (tok, tf, blocks, hf, lnf, x.shape)
        self.last_stats = stats
        return y, cache

    def backward(self, cache, dy) -> dict[str, np.ndarray]:
        cfg = self.config
        p = self.params
        tok, tf, blocks, hf, lnf, xshape = cache
        b = xshape[0]
        s = cfg.grid.seq_len
        nh, hd, w = cfg.heads, cfg.dim, cfg.width
        grads = {}

        dy = np.asarray(dy, dtype=np.float64).reshape(b, s, cfg.channels)
        if cfg.reorder:
            dy = apply_reorder(dy, self.perm, axis=1)
        grads["out.w"] = _wgrad(hf, dy)
        grads["out.b"] = dy.reshape(-1, cfg.channels).sum(axis=0)
        dh, grads["final.ln.g"], grads["final.ln.b"] = layer_norm_backward(dy @ p["out.w"].T, lnf)

        for layer in reversed(range(cfg.depth)):
            pre = f"blocks.{layer}."
            a, ln1, att, om, a2, ln2, u, gu, th = blocks[layer]
            # MLP branch
            grads[pre + "fc2.w"] = _wgrad(gu, dh)
            grads[pre + "fc2.b"] = dh.reshape(-1, w).sum(axis=0)
            du = gelu_backward(dh @ p[pre + "fc2.w"].T, u, th)
            grads[pre + "fc1.w"] = _wgrad(a2, du)
            grads[pre + "fc1.b"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
            da2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(
                du @ p[pre + "fc1.w"].T, ln2
            )
            dh = dh + da2
            # attention branch
            grads[pre + "proj.w"] = _wgrad(om, dh)
            grads[pre + "proj.b"] = dh.reshape(-1, w).sum(axis=0)
            dom = dh @ p[pre + "proj.w"].T
            do = dom.reshape(b, s, nh, hd).transpose(0, 2, 1, 3).reshape(b * nh, s, hd)
            dq, dk, dv = self._attend_backward(do, att, do.shape)
            dqkv = np.stack([dq, dk, dv]).reshape(3, b, nh, s, hd).transpose(1, 3, 0, 2, 4)
            dqkv = dqkv.reshape(b, s, 3 * w)
            grads[pre + "qkv.w"] = _wgrad(a, dqkv)
            da, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(
                dqkv @ p[pre + "qkv.w"].T, ln1
            )
            dh = dh + da

        grads["embed.w"] = _wgrad(tok, dh)
        grads["embed.b"] = dh.reshape(-1, w).sum(axis=0)
        grads["pos.w"] = self.pos.T @ dh.sum(axis=0)
        grads["time.w"] = tf.T @ dh.sum(axis=1)
        return grads

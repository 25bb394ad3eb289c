"""Toy model configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

from ..errors import ParamError
from ..layout import TokenGrid

_MODE_RE = re.compile(
    r"^\s*(?P<kind>full|identity|nabla)"
    r"(?:\(\s*(?P<thr>[0-9.eE+-]+)\s*\))?"
    r"(?:\s*\+\s*sta\(\s*(?P<sta>\d+\s*,\s*\d+\s*,\s*\d+)\s*\))?\s*$"
)


@dataclass(frozen=True)
class AttentionMode:
    """``full``, ``nabla(thr)`` or ``nabla(thr)+sta(wt,wh,ww)``.

    ``identity`` replaces attention by its value input; it exists for
    layout tests only.
    """

    kind: str = "full"
    thr: float | None = None
    sta: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("full", "nabla", "identity"):
            raise ParamError(f"unknown attention kind {self.kind!r}")
        if self.kind == "nabla":
            if self.thr is None or not 0.0 <= self.thr <= 1.0:
                raise ParamError(f"nabla needs thr in [0, 1], got {self.thr}")
        elif self.thr is not None or self.sta is not None:
            raise ParamError(f"{self.kind} attention takes no parameters")

    @classmethod
    def parse(cls, text: str) -> "AttentionMode":
        m = _MODE_RE.match(text)
        if m is None:
            raise ParamError(f"cannot parse attention mode {text!r}")
        thr = float(m["thr"]) if m["thr"] is not None else None
        sta = tuple(int(s) for s in m["sta"].split(",")) if m["sta"] else None
        if sta is not None and m["kind"] != "nabla":
            raise ParamError("sta window is only valid together with nabla")
        return cls(m["kind"], thr, sta)

    def __str__(self):
        if self.kind != "nabla":
            return self.kind
        s = f"nabla({self.thr:g})"
        if self.sta:
            s += "+sta({},{},{})".format(*self.sta)
        return s


def _grid_default():
    return TokenGrid(4, 8, 8, 2)


@dataclass(frozen=True)
class ToyDiTConfig:
    grid: TokenGrid = field(default_factory=_grid_default)
    channels: int = 4
    depth: int = 2
    heads: int = 2
    dim: int = 16
    mlp_ratio: int = 4
    train_steps: int = 300
    batch: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    attention_mode: AttentionMode = field(default_factory=AttentionMode)
    val_every: int = 25
    train_samples: int = 64
    val_samples: int = 16
    reorder: bool = True

    def __post_init__(self):
        for name in ("channels", "depth", "heads", "dim", "mlp_ratio", "batch",
                     "val_every", "train_samples", "val_samples"):
            if getattr(self, name) < 1:
                raise ParamError(f"{name} must be >= 1")
        if self.train_steps < 0:
            raise ParamError("train_steps must be >= 0")
        if self.lr <= 0:
            raise ParamError("lr must be positive")

    @property
    def width(self) -> int:
        return self.heads * self.dim

    def replace(self, **changes) -> "ToyDiTConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        """Flat string mapping, the same shape the config file uses."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, TokenGrid):
                v = f"{v.t_frames},{v.height},{v.width},{v.patch}"
            out[f.name] = str(v)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(ToyDiTConfig)}
_ALIASES = {"mode": "attention_mode", "steps": "train_steps"}


def _coerce(name: str, raw: str):
    if name == "grid":
        return TokenGrid.parse(raw)
    if name == "attention_mode":
        return AttentionMode.parse(raw)
    if name == "reorder":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParamError(f"reorder must be a boolean, got {raw!r}")
    if name in ("lr", "beta1", "beta2", "eps"):
        return float(raw)
    return int(raw)


def config_from_mapping(values: dict[str, str], base: ToyDiTConfig | None = None) -> ToyDiTConfig:
    base = base or ToyDiTConfig()
    changes = {}
    for key, raw in values.items():
        name = _ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ParamError(f"unknown config key {key!r}")
        try:
            changes[name] = _coerce(name, str(raw))
        except ValueError:
            raise ParamError(f"bad value for {key}: {raw!r}") from None
    return base.replace(**changes)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParamError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParamError(f"config line {lineno}: empty key")
        values[key] = val
    return values


def load_config(path, base: ToyDiTConfig | None = None) -> ToyDiTConfig:
    from ..tensor_io import read_bytes

    return config_from_mapping(parse_config_text(read_bytes(path).decode("utf-8")), base)

"""Rotary positional embedding.

Each adjacent pair ``(v[2i], v[2i+1])`` of a head vector is rotated by
``pos * freqs[i]`` with ``freqs[i] = base ** (-2i/d)``. The half-split
pairing ``(v[i], v[i + d/2])`` used by some model families is available
through ``RotaryConfig.layout = "half"``.

Angles and their cos/sin are evaluated in float64 and then rounded to the
rotation precision, so the only rounding a policy introduces is in the
rotation arithmetic itself and in the later pipeline stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._reduce import pairwise_sum
from .precision import EXACT, Precision, PrecisionPolicy, round_to

__all__ = [
    "RotaryConfig",
    "PositionShift",
    "make_rotary_config",
    "rotation_table",
    "rotate",
    "rope_logit",
]

# float64 represents every integer below this exactly; beyond it pos * freq loses the position
MAX_POSITION = 2**53


@dataclass(frozen=True)
class RotaryConfig:
    head_dim: int
    base: float = 10000.0
    layout: str = "chunked"
    freqs: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = self.head_dim
        if isinstance(d, bool) or int(d) != d or d < 2 or d % 2:
            raise ValueError(f"head_dim must be an even integer >= 2, got {d!r}")
        if not (self.base > 0 and math.isfinite(self.base)):
            raise ValueError(f"base must be a positive finite number, got {self.base!r}")
        if self.layout not in ("chunked", "half"):
            raise ValueError(f"layout must be 'chunked' or 'half', got {self.layout!r}")
        object.__setattr__(self, "head_dim", int(d))
        object.__setattr__(self, "base", float(self.base))
        freqs = tuple(self.base ** (-2.0 * i / self.head_dim) for i in range(self.head_dim // 2))
        object.__setattr__(self, "freqs", freqs)

    @property
    def freq_array(self) -> np.ndarray:
        return np.array(self.freqs, dtype=np.float64)

    def pair_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices of the first and second member of every rotated pair."""
        half = self.head_dim // 2
        if self.layout == "chunked":
            first = np.arange(0, self.head_dim, 2)
            return first, first + 1
        first = np.arange(half)
        return first, first + half

    def with_base(self, base: float) -> "RotaryConfig":
        """Same config with an effective base, e.g. from an NTK-style rescaling."""
        return RotaryConfig(self.head_dim, base, self.layout)


@dataclass(frozen=True)
class PositionShift:
    delta: int = 0

    def __post_init__(self):
        if isinstance(self.delta, bool) or int(self.delta) != self.delta or self.delta < 0:
            raise ValueError(f"shift must be a non-negative integer, got {self.delta!r}")
        object.__setattr__(self, "delta", int(self.delta))

    def __int__(self) -> int:
        return self.delta


def make_rotary_config(d: int, base: float = 10000.0, layout: str = "chunked") -> RotaryConfig:
    return RotaryConfig(d, base, layout)


def _as_delta(delta) -> int:
    return PositionShift(int(delta) if not isinstance(delta, PositionShift) else delta.delta).delta


@lru_cache(maxsize=64)
def _range_table(cfg: RotaryConfig, start: int, stop: int):
    return _table(np.arange(start, stop, dtype=np.int64), cfg)


def _table(positions: np.ndarray, cfg: RotaryConfig):
    if positions.size and (positions.min() < 0 or positions.max() >= MAX_POSITION):
        raise OverflowError("position outside the exactly representable float64 range")
    angles = positions.astype(np.float64)[:, None] * cfg.freq_array[None, :]
    flat = angles.ravel().tolist()
    cos = np.array([math.cos(a) for a in flat], dtype=np.float64).reshape(angles.shape)
    sin = np.array([math.sin(a) for a in flat], dtype=np.float64).reshape(angles.shape)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def rotation_table(positions, cfg: RotaryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Float64 ``cos`` and ``sin`` of ``pos * freqs`` with shape ``(P, d/2)``."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.size and np.array_equal(positions, np.arange(positions[0], positions[0] + positions.size)):
        return _range_table(cfg, int(positions[0]), int(positions[0]) + positions.size)
    return _table(positions, cfg)


def apply_rotation(v: np.ndarray, cos: np.ndarray, sin: np.ndarray, cfg: RotaryConfig, precision) -> np.ndarray:
    """Rotate rows of ``v`` (shape ``(..., P, d)``) with precomputed tables.

    Arithmetic is done in ``precision``; the tables are rounded to it first.
    """
    dtype = Precision(precision).dtype
    v = np.asarray(v).astype(dtype, copy=False)
    c = cos.astype(dtype)
    s = sin.astype(dtype)
    a, b = cfg.pair_indices()
    x0 = v[..., a]
    x1 = v[..., b]
    out = np.empty(v.shape, dtype=dtype)
    out[..., a] = x0 * c - x1 * s
    out[..., b] = x0 * s + x1 * c
    return out


def rotate(v, pos, cfg: RotaryConfig, precision: Precision | str = Precision.F64) -> np.ndarray:
    """Rotate a head vector (or a stack of them) to position ``pos``.

    ``v`` has shape ``(d,)`` or ``(P, d)``; ``pos`` is a scalar or ``P`` positions.
    """
    precision = Precision(precision)
    if precision is Precision.BF16:
        raise ValueError("rotation precision must be f64 or f32")
    v = np.asarray(v)
    if v.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector has {v.shape[-1]} components, config expects {cfg.head_dim}")
    pos_arr = np.atleast_1d(np.asarray(pos))
    if np.any(pos_arr < 0):
        raise ValueError("positions must be non-negative")
    cos, sin = rotation_table(pos_arr, cfg)
    if v.ndim == 1:
        if pos_arr.size != 1:
            raise ValueError("a single vector takes a single position")
        return apply_rotation(v[None, :], cos, sin, cfg, precision)[0]
    return apply_rotation(v, cos, sin, cfg, precision)


def rope_logit(q, k, i: int, j: int, delta=0, cfg: RotaryConfig | None = None,
               policy: PrecisionPolicy = EXACT) -> float:
    """``(R_{i+delta} q) . (R_{j+delta} k)`` through the policy pipeline, unscaled."""
    q = np.asarray(q)
    k = np.asarray(k)
    if cfg is None:
        cfg = make_rotary_config(q.shape[-1])
    if q.shape != (cfg.head_dim,) or k.shape != (cfg.head_dim,):
        raise ValueError("q and k must both have head_dim components")
    if i < 0 or j < 0:
        raise ValueError("positions must be non-negative")
    shift = _as_delta(delta)
    rot = policy.rotation_precision
    qr = rotate(round_to(q, rot), i + shift, cfg, rot)
    kr = rotate(round_to(k, rot), j + shift, cfg, rot)
    acc = policy.accumulation.dtype
    qs = round_to(qr, policy.qk_storage).astype(acc)
    ks = round_to(kr, policy.qk_storage).astype(acc)
    return float(pairwise_sum(qs * ks))

"""Multi-layer, multi-head RoPE attention logits and scores.

Only the query/key side of attention is modelled. Each layer is an
independent bank of heads fed the same input ``X``; there are no value or
output projections, residuals or MLPs. Logits are unscaled (no ``1/sqrt(d)``).

Pipeline for one layer under a :class:`~ropelab.precision.PrecisionPolicy`::

    q = W_Q x, k = W_K x        rotation precision, pairwise-tree sums
    rotate q, k per head        rotation precision, cos/sin from float64
    round q, k                  q/k storage precision
    A_ij = q_i . k_j            accumulation precision, pairwise-tree sums
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._reduce import pairwise_sum
from .masks import AttentionPlan
from .precision import EXACT, Precision, PrecisionPolicy, policy_from_name, round_to
from .rope import RotaryConfig, _as_delta, apply_rotation, make_rotary_config, rotation_table

__all__ = [
    "LayerWeights",
    "AttentionStack",
    "init_random",
    "gaussian_inputs",
    "save_weights",
    "load_weights",
    "WeightLoadError",
    "MalformedContainerError",
    "ShapeMismatchError",
    "NonFiniteWeightsError",
    "project_inputs",
    "forward_logits",
    "layer_logits",
    "shifted_positions",
    "first_column_logits",
    "softmax_scores",
    "causal_mask",
]

MAGIC = b"RPLTENS1"


class WeightLoadError(ValueError):
    pass


class MalformedContainerError(WeightLoadError):
    pass


class ShapeMismatchError(WeightLoadError):
    pass


class NonFiniteWeightsError(WeightLoadError):
    pass


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k"):
            w = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ValueError(f"{name} must be square, got shape {w.shape}")
            if not np.isfinite(w).all():
                raise ValueError(f"{name} has non-finite entries")
            w.setflags(write=False)
            object.__setattr__(self, name, w)
        if self.w_q.shape != self.w_k.shape:
            raise ValueError("w_q and w_k shapes differ")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True)
class AttentionStack:
    layers: tuple
    heads: int
    rotary: RotaryConfig

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a stack needs at least one layer")
        dims = {layer.d_model for layer in self.layers}
        if len(dims) != 1:
            raise ValueError("all layers must share d_model")
        (d_model,) = dims
        if self.heads < 1 or d_model % self.heads:
            raise ValueError(f"d_model {d_model} is not divisible by {self.heads} heads")
        if self.rotary.head_dim != d_model // self.heads:
            raise ValueError("rotary head_dim does not match d_model / heads")

    @property
    def d_model(self) -> int:
        return self.layers[0].d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def _check_dims(L: int, H: int, d_model: int):
    if L < 1 or H < 1 or d_model < 1:
        raise ValueError("layers, heads and d_model must be positive")
    if d_model % H:
        raise ValueError(f"d_model {d_model} is not divisible by {H} heads")
    if (d_model // H) % 2:
        raise ValueError("head_dim must be even for rotary embeddings")


def init_random(L: int, H: int, d_model: int, seed: int = 0, base: float = 10000.0) -> AttentionStack:
    """Uniform ``[-1/sqrt(d_model), 1/sqrt(d_model)]`` weights (PyTorch's default Linear init)."""
    _check_dims(L, H, d_model)
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_model)
    layers = []
    for _ in range(L):
        w_q = rng.uniform(-bound, bound, size=(d_model, d_model)).astype(np.float32)
        w_k = rng.uniform(-bound, bound, size=(d_model, d_model)).astype(np.float32)
        layers.append(LayerWeights(w_q, w_k))
    return AttentionStack(tuple(layers), H, make_rotary_config(d_model // H, base))


def gaussian_inputs(T: int, d_model: int, seed: int = 0, index: int = 0) -> np.ndarray:
    """Standard normal token embeddings, float32, one stream per ``(seed, index)``."""
    rng = np.random.default_rng([int(seed), int(index)])
    return rng.standard_normal((T, d_model)).astype(np.float32)


# -- tensor container -------------------------------------------------------------


def save_weights(stack: AttentionStack, path) -> None:
    header = json.dumps({
        "layers": stack.num_layers,
        "heads": stack.heads,
        "d_model": stack.d_model,
        "dtype": "f32",
        "order": "row-major",
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for layer in stack.layers:
            fh.write(layer.w_q.astype("<f4").tobytes(order="C"))
            fh.write(layer.w_k.astype("<f4").tobytes(order="C"))


def load_weights(path, base: float = 10000.0) -> AttentionStack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise MalformedContainerError("malformed container: missing magic or header length")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise MalformedContainerError("malformed container: header is truncated")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedContainerError(f"malformed container: bad header ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"layers", "heads", "d_model", "dtype", "order"}:
        raise MalformedContainerError("malformed container: unexpected header keys")
    if header["dtype"] != "f32" or header["order"] != "row-major":
        raise MalformedContainerError("malformed container: only row-major f32 is supported")
    try:
        L, H, D = (int(header[k]) for k in ("layers", "heads", "d_model"))
        _check_dims(L, H, D)
    except (TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"shape mismatch: {exc}") from None

    payload = blob[start + hlen :]
    expected = 2 * L * D * D * 4
    if len(payload) != expected:
        raise ShapeMismatchError(
            f"shape mismatch: header implies {expected} payload bytes, file has {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(L, 2, D, D)
    if not np.isfinite(values).all():
        raise NonFiniteWeightsError("weights contain NaN or infinity")
    layers = [LayerWeights(values[l, 0].copy(), values[l, 1].copy()) for l in range(L)]
    return AttentionStack(tuple(layers), H, make_rotary_config(D // H, base))


# -- forward ---------------------------------------------------------------------------


def project_inputs(stack: AttentionStack, X, policy: PrecisionPolicy = EXACT) -> list:
    """Per-layer ``(q, k)`` projections, shape ``(T, d_model)``, in rotation precision.

    The projections do not depend on the positional shift, so sweeps reuse them.
    """
    policy = policy_from_name(policy)
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != stack.d_model or X.shape[0] < 1:
        raise ValueError(f"X must have shape (T, {stack.d_model}) with T >= 1, got {X.shape}")
    dtype = policy.rotation_precision.dtype
    x = np.ascontiguousarray(X, dtype=dtype)
    out = []
    for layer in stack.layers:
        q = _kernels.project(x, layer.w_q.astype(dtype))
        k = _kernels.project(x, layer.w_k.astype(dtype))
        out.append((q, k))
    return out


def shifted_positions(T: int, delta, plan: AttentionPlan | None) -> np.ndarray:
    shift = _as_delta(delta)
    if plan is None:
        return np.arange(T, dtype=np.int64) + shift
    if plan.T != T:
        raise ValueError(f"plan covers {plan.T} tokens, input has {T}")
    return np.asarray(plan.position_ids, dtype=np.int64) + shift


def _head_views(stack: AttentionStack, qk, positions, policy: PrecisionPolicy):
    """Rotated, storage-rounded heads in accumulation dtype, shape ``(H, T, d)``."""
    rot = policy.rotation_precision
    acc = policy.accumulation.dtype
    cos, sin = rotation_table(positions, stack.rotary)
    T = qk.shape[0]
    heads = qk.reshape(T, stack.heads, stack.head_dim).transpose(1, 0, 2)
    rotated = apply_rotation(heads, cos, sin, stack.rotary, rot)
    stored = round_to(rotated, policy.qk_storage)
    return np.ascontiguousarray(stored.astype(acc))


def layer_logits(stack: AttentionStack, projected: list, layer: int, positions: np.ndarray,
                 policy: PrecisionPolicy, plan: AttentionPlan | None = None) -> np.ndarray:
    """Logits of every head of one layer, shape ``(H, T, T)``."""
    q, k = projected[layer]
    qh = _head_views(stack, q, positions, policy)
    kh = _head_views(stack, k, positions, policy)
    T = q.shape[0]
    out = np.zeros((stack.heads, T, T), dtype=np.float64)
    for h in range(stack.heads):
        if plan is None:
            out[h] = _kernels.causal_logits(qh[h], kh[h])
        else:
            out[h] = _kernels.interval_logits(qh[h], kh[h], plan.row_ptr, plan.lo, plan.hi)
    return out


def forward_logits(stack: AttentionStack, X, delta=0, policy: PrecisionPolicy = EXACT,
                   plan: AttentionPlan | None = None, projected: list | None = None) -> np.ndarray:
    """Logits ``A[l, h, i, j]``, float64, shape ``(L, H, T, T)``.

    Entries outside the causal mask (or outside ``plan``) are 0.
    """
    policy = policy_from_name(policy)
    if projected is None:
        projected = project_inputs(stack, X, policy)
    T = projected[0][0].shape[0]
    positions = shifted_positions(T, delta, plan)
    return np.stack([layer_logits(stack, projected, l, positions, policy, plan)
                     for l in range(stack.num_layers)])


def first_column_logits(stack: AttentionStack, X, delta=0, policy: PrecisionPolicy = EXACT,
                        projected: list | None = None) -> np.ndarray:
    """Logits against the first key only, ``A[l, h, i, 0]``, shape ``(L, H, T)``.

    Same values as ``forward_logits(...)[..., 0]`` at O(T) cost per head.
    """
    policy = policy_from_name(policy)
    if projected is None:
        projected = project_inputs(stack, X, policy)
    T = projected[0][0].shape[0]
    positions = shifted_positions(T, delta, None)
    out = np.empty((stack.num_layers, stack.heads, T), dtype=np.float64)
    for l, (q, k) in enumerate(projected):
        qh = _head_views(stack, q, positions, policy)
        kh = _head_views(stack, k[:1], positions[:1], policy)
        for h in range(stack.heads):
            out[l, h] = _kernels.column_logits(qh[h], kh[h, 0])
    return out


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def softmax_scores(logits, plan: AttentionPlan | None = None,
                   precision: Precision | str = Precision.F64) -> np.ndarray:
    """Row-wise softmax over allowed entries; disallowed entries are exactly 0.

    Evaluated in ``precision`` with max subtraction, returned as float64.
    """
    logits = np.asarray(logits)
    T = logits.shape[-1]
    allowed = causal_mask(T) if plan is None else plan.allowed_matrix()
    dtype = Precision(precision).dtype
    if Precision(precision) is Precision.BF16:
        raise ValueError("softmax precision must be f64 or f32")
    x = np.where(allowed, logits.astype(dtype), dtype.type(-np.inf))
    row_max = x.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, dtype.type(0))
    e = np.where(allowed, np.exp(x - row_max), dtype.type(0))
    total = pairwise_sum(e)[..., None]
    total = np.where(total > 0, total, dtype.type(1))
    return (e / total).astype(np.float64)

"""Shift-invariance diagnostics for RoPE attention.

``D`` compares attention *scores* of the same input under two position
shifts. Each key column ``j`` is weighted by ``n_j = 1 / (T - j)``, the
number of causal entries in that column, so every column contributes on
the same footing::

    D = sum_{l,h} sum_j n_j * sum_i |S_ij(shift_1) - S_ij(shift_2)|

``D_logit`` looks at the pre-softmax logits against the first key only::

    D_logit = (1/T) * sum_{l,h} sum_i |A_i0(shift_1) - A_i0(shift_2)|

All metric arithmetic is float64 with fixed-order sums on top of the
policy-governed forward passes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._reduce import pairwise_sum
from .attention import (
    AttentionStack,
    first_column_logits,
    gaussian_inputs,
    layer_logits,
    project_inputs,
    shifted_positions,
    softmax_scores,
)
from .precision import PrecisionPolicy, policy_from_name
from .rope import _as_delta

__all__ = [
    "DEFAULT_SHIFTS",
    "DEFAULT_DELTA2",
    "DEFAULT_LENGTHS",
    "DEFAULTS",
    "DiffConfig",
    "DiffReport",
    "SweepRow",
    "SweepResult",
    "normalization_vector",
    "score_diff_D",
    "per_token_diff",
    "logit_diff_first_token",
    "shift_sweep",
    "length_sweep",
    "CSV_HEADER",
    "write_csv",
    "sweep_json",
]

DEFAULT_SHIFTS = (0, 2, 4, 6, 8, 10, 12, 14, 15, 17, 18, 20, 22, 50, 100, 200, 500, 1000, 2000)
DEFAULT_DELTA2 = 16
DEFAULT_LENGTHS = (64, 128, 256, 512, 1024, 2048, 4096, 8192)

# small enough to run on a laptop in about a minute per policy
DEFAULTS = {"layers": 2, "heads": 4, "d_model": 256, "seq_len": 1024, "num_sequences": 10}

CSV_HEADER = ("delta1", "delta2", "T", "policy", "seed", "metric", "value")


def normalization_vector(T: int) -> np.ndarray:
    """``[1/T, 1/(T-1), ..., 1]``: reciprocal causal column heights."""
    return 1.0 / (T - np.arange(T, dtype=np.float64))


@dataclass(frozen=True)
class DiffConfig:
    delta_1: int = 0
    delta_2: int = DEFAULT_DELTA2
    sequence_length: int = DEFAULTS["seq_len"]
    policy: PrecisionPolicy = field(default_factory=lambda: policy_from_name("fa2-bf16"))
    num_sequences: int = DEFAULTS["num_sequences"]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "delta_1", _as_delta(self.delta_1))
        object.__setattr__(self, "delta_2", _as_delta(self.delta_2))
        object.__setattr__(self, "policy", policy_from_name(self.policy))
        if self.sequence_length < 1 or self.num_sequences < 1:
            raise ValueError("sequence_length and num_sequences must be positive")

    @property
    def n(self) -> np.ndarray:
        return normalization_vector(self.sequence_length)

    def inputs(self, d_model: int):
        for s in range(self.num_sequences):
            yield gaussian_inputs(self.sequence_length, d_model, self.seed, s)


@dataclass
class DiffReport:
    D: float
    per_token: np.ndarray
    per_layer_head: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "D": self.D,
            "per_token": self.per_token.tolist(),
            "per_layer_head": self.per_layer_head.tolist(),
            "metadata": self.metadata,
        }


def _column_diffs(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """``sum_i |s1 - s2|`` per key column, for a stack of ``(T, T)`` score matrices."""
    return pairwise_sum(np.abs(s1 - s2), axis=-2)


def _score_diff(stack, projected, delta_1, delta_2, policy, cache=None) -> DiffReport:
    T = projected[0][0].shape[0]
    n = normalization_vector(T)
    pos1 = shifted_positions(T, delta_1, None)
    pos2 = shifted_positions(T, delta_2, None)
    per_layer_head = np.zeros((stack.num_layers, stack.heads), dtype=np.float64)
    weighted = np.zeros((stack.num_layers, stack.heads, T), dtype=np.float64)
    for l in range(stack.num_layers):
        s1 = softmax_scores(layer_logits(stack, projected, l, pos1, policy), precision=policy.softmax_precision)
        key = (l, delta_2)
        if cache is not None and key in cache:
            s2 = cache[key]
        else:
            s2 = softmax_scores(layer_logits(stack, projected, l, pos2, policy),
                                precision=policy.softmax_precision)
            if cache is not None:
                cache[key] = s2
        weighted[l] = n * _column_diffs(s1, s2)
        per_layer_head[l] = pairwise_sum(weighted[l])
    # fixed (layer, head) order
    per_token = np.zeros(T, dtype=np.float64)
    for l in range(stack.num_layers):
        for h in range(stack.heads):
            per_token = per_token + weighted[l, h]
    return DiffReport(
        D=float(pairwise_sum(per_token)),
        per_token=per_token,
        per_layer_head=per_layer_head,
        metadata={"policy": policy.name, "delta1": int(delta_1), "delta2": int(delta_2), "T": T},
    )


def score_diff_D(stack: AttentionStack, X, delta_1, delta_2, policy="fa2-bf16") -> DiffReport:
    """Column-normalised score difference between two position shifts."""
    policy = policy_from_name(policy)
    d1, d2 = _as_delta(delta_1), _as_delta(delta_2)
    return _score_diff(stack, project_inputs(stack, X, policy), d1, d2, policy)


def per_token_diff(stack: AttentionStack, X, delta_1, delta_2, policy="fa2-bf16") -> np.ndarray:
    """Per key-column contributions to ``D``; they sum to ``D``."""
    return score_diff_D(stack, X, delta_1, delta_2, policy).per_token


def _logit_diff(stack, projected, delta_1, delta_2, policy) -> float:
    T = projected[0][0].shape[0]
    a1 = first_column_logits(stack, None, delta_1, policy, projected=projected)
    a2 = first_column_logits(stack, None, delta_2, policy, projected=projected)
    return float(pairwise_sum(np.abs(a1 - a2).ravel())) / T


def logit_diff_first_token(stack: AttentionStack, X, delta_1, delta_2, policy="fa2-bf16") -> float:
    policy = policy_from_name(policy)
    d1, d2 = _as_delta(delta_1), _as_delta(delta_2)
    return _logit_diff(stack, project_inputs(stack, X, policy), d1, d2, policy)


# -- sweeps ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    delta1: int
    delta2: int
    T: int
    policy: str
    seed: int
    metric: str
    value: float

    def as_tuple(self) -> tuple:
        return (self.delta1, self.delta2, self.T, self.policy, self.seed, self.metric, self.value)


@dataclass
class SweepResult:
    rows: list
    per_token: dict = field(default_factory=dict)
    per_sequence: dict = field(default_factory=dict)

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.rows], dtype=np.float64)

    @property
    def monotone_increasing(self) -> bool:
        v = self.values()
        return bool(np.all(np.diff(v) >= 0))


def shift_sweep(stack: AttentionStack, deltas=DEFAULT_SHIFTS, delta_2: int = DEFAULT_DELTA2,
                policy="fa2-bf16", num_sequences: int = DEFAULTS["num_sequences"],
                T: int = DEFAULTS["seq_len"], seed: int = 0) -> SweepResult:
    """Mean ``D`` over seeded Gaussian inputs for each first shift in ``deltas``."""
    policy = policy_from_name(policy)
    deltas = [_as_delta(d) for d in deltas]
    delta_2 = _as_delta(delta_2)
    cfg = DiffConfig(0, delta_2, T, policy, num_sequences, seed)
    totals = {d: 0.0 for d in deltas}
    token_totals = {d: np.zeros(T, dtype=np.float64) for d in deltas}
    per_sequence = {d: [] for d in deltas}
    for X in cfg.inputs(stack.d_model):
        projected = project_inputs(stack, X, policy)
        cache: dict = {}
        for d in deltas:
            report = _score_diff(stack, projected, d, delta_2, policy, cache)
            totals[d] += report.D
            token_totals[d] = token_totals[d] + report.per_token
            per_sequence[d].append(report.D)
    rows = [
        SweepRow(d, delta_2, T, policy.name, seed, "D", totals[d] / num_sequences) for d in deltas
    ]
    per_token = {d: token_totals[d] / num_sequences for d in deltas}
    return SweepResult(rows, per_token, per_sequence)


def length_sweep(stack: AttentionStack, lengths=DEFAULT_LENGTHS, delta_1: int = 0,
                 delta_2: int = DEFAULT_DELTA2, policy="fa2-bf16",
                 num_sequences: int = DEFAULTS["num_sequences"], seed: int = 0) -> SweepResult:
    """Mean ``D_logit`` per sequence length.

    Whether the curve increases is available as ``monotone_increasing``;
    it is reported, not enforced.
    """
    policy = policy_from_name(policy)
    lengths = [int(t) for t in lengths]
    if any(t < 1 for t in lengths) or lengths != sorted(lengths):
        raise ValueError("lengths must be positive and sorted ascending")
    d1, d2 = _as_delta(delta_1), _as_delta(delta_2)
    rows = []
    per_sequence = {}
    for T in lengths:
        total = 0.0
        per_sequence[T] = []
        for s in range(num_sequences):
            X = gaussian_inputs(T, stack.d_model, seed, s)
            value = _logit_diff(stack, project_inputs(stack, X, policy), d1, d2, policy)
            total += value
            per_sequence[T].append(value)
        rows.append(SweepRow(d1, d2, T, policy.name, seed, "D_logit", total / num_sequences))
    return SweepResult(rows, {}, per_sequence)


# -- output ----------------------------------------------------------------------------


def write_csv(rows, out=None) -> str:
    """Write rows under :data:`CSV_HEADER`; returns the text as well."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        t = r.as_tuple() if isinstance(r, SweepRow) else tuple(r)
        writer.writerow([*t[:-1], repr(float(t[-1]))])
    text = buf.getvalue()
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    return text


def sweep_json(result: SweepResult) -> str:
    payload = {
        "rows": [dict(zip(CSV_HEADER, r.as_tuple())) for r in result.rows],
        "per_token": {str(k): v.tolist() for k, v in result.per_token.items()},
        "per_sequence": {str(k): list(v) for k, v in result.per_sequence.items()},
    }
    return json.dumps(payload, sort_keys=True)

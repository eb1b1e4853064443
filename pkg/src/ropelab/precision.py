"""BFloat16 codec and the precision policies of the attention pipeline.

A bf16 word is the top half of a binary32 pattern: 1 sign bit, 8 exponent
bits, 7 mantissa bits. Encoding rounds to nearest with ties to even,
subnormals are kept (no flush-to-zero) and NaN stays NaN.

The pipeline modelled by :class:`PrecisionPolicy` has four stages::

    q/k projection + rotation  ->  q/k storage  ->  dot accumulation  ->  softmax

and each stage is evaluated in the precision the policy assigns to it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Precision",
    "Stage",
    "PrecisionPolicy",
    "EXACT",
    "F32",
    "FA2_BF16",
    "POLICIES",
    "policy_from_name",
    "Bf16Word",
    "encode_bf16",
    "decode_bf16",
    "encode_bf16_bits",
    "decode_bf16_bits",
    "round_bf16",
    "round_to",
    "round_along_policy",
]


class Precision(str, enum.Enum):
    F64 = "f64"
    F32 = "f32"
    BF16 = "bf16"

    @property
    def dtype(self) -> np.dtype:
        """Numpy dtype that carries values of this precision (bf16 lives in f32)."""
        return np.dtype(np.float64) if self is Precision.F64 else np.dtype(np.float32)


class Stage(str, enum.Enum):
    ROTATION = "rotation"
    QK_STORAGE = "qk_storage"
    ACCUMULATION = "accumulation"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class PrecisionPolicy:
    """Where rounding happens along q/k -> rotate -> dot -> softmax.

    ``rotation_precision`` also governs the q/k projections, which run
    outside the attention kernel alongside the rotation.
    """

    rotation_precision: Precision = Precision.F64
    qk_storage: Precision = Precision.F64
    accumulation: Precision = Precision.F64
    softmax_precision: Precision = Precision.F64
    name: str = "custom"

    def __post_init__(self):
        for field, allowed in (
            ("rotation_precision", (Precision.F64, Precision.F32)),
            ("qk_storage", (Precision.F64, Precision.F32, Precision.BF16)),
            ("accumulation", (Precision.F64, Precision.F32)),
            ("softmax_precision", (Precision.F64, Precision.F32)),
        ):
            value = Precision(getattr(self, field))
            if value not in allowed:
                raise ValueError(f"{field} cannot be {value.value}")
            object.__setattr__(self, field, value)

    def precision_for(self, stage: Stage | str) -> Precision:
        stage = Stage(stage)
        return {
            Stage.ROTATION: self.rotation_precision,
            Stage.QK_STORAGE: self.qk_storage,
            Stage.ACCUMULATION: self.accumulation,
            Stage.SOFTMAX: self.softmax_precision,
        }[stage]


EXACT = PrecisionPolicy(Precision.F64, Precision.F64, Precision.F64, Precision.F64, name="exact")
F32 = PrecisionPolicy(Precision.F32, Precision.F32, Precision.F32, Precision.F32, name="f32")
# rotation in f32 outside the kernel, bf16 q/k inside it, f32 accumulation
FA2_BF16 = PrecisionPolicy(Precision.F32, Precision.BF16, Precision.F32, Precision.F32, name="fa2-bf16")

POLICIES = {p.name: p for p in (EXACT, F32, FA2_BF16)}


def policy_from_name(name: str | PrecisionPolicy) -> PrecisionPolicy:
    if isinstance(name, PrecisionPolicy):
        return name
    key = name.strip().lower().replace("_", "-")
    try:
        return POLICIES[key]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; expected one of {sorted(POLICIES)}") from None


# -- codec ---------------------------------------------------------------------


def encode_bf16_bits(x) -> np.ndarray:
    """Round binary32 values to bf16 bit patterns (ties to even).

    Inputs that are not already float32 are first converted to float32.
    """
    bits = np.asarray(x, dtype=np.float32).view(np.uint32)
    upper = bits >> np.uint32(16)
    bias = np.uint32(0x7FFF) + (upper & np.uint32(1))
    rounded = (bits + bias) >> np.uint32(16)
    is_nan = (bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    # keep sign and payload top bits, force the quiet bit
    quiet = upper | np.uint32(0x0040)
    return np.where(is_nan, quiet, rounded).astype(np.uint16)


def decode_bf16_bits(bits) -> np.ndarray:
    """Widen bf16 patterns to float32 by zero-filling the low 16 bits."""
    wide = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return wide.view(np.float32)


def round_bf16(x) -> np.ndarray:
    """Round to the nearest bf16 value, returned as float32."""
    return decode_bf16_bits(encode_bf16_bits(x))


@dataclass(frozen=True)
class Bf16Word:
    bits: int

    def __post_init__(self):
        if not 0 <= int(self.bits) <= 0xFFFF:
            raise ValueError(f"bf16 pattern out of range: {self.bits!r}")
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def value(self) -> np.float32:
        return decode_bf16(self)

    def __repr__(self) -> str:
        return f"Bf16Word(0x{self.bits:04X})"


def encode_bf16(x) -> Bf16Word:
    return Bf16Word(int(encode_bf16_bits(np.float32(x))))


def decode_bf16(w: Bf16Word | int) -> np.float32:
    bits = w.bits if isinstance(w, Bf16Word) else int(w)
    return decode_bf16_bits(np.uint16(bits))[()]


# -- policy rounding -----------------------------------------------------------


def round_to(x, precision: Precision | str):
    """Round ``x`` to ``precision``; f64 is the identity on float64 input."""
    precision = Precision(precision)
    if precision is Precision.F64:
        return np.asarray(x, dtype=np.float64)
    if precision is Precision.F32:
        return np.asarray(x, dtype=np.float32)
    return round_bf16(np.asarray(x, dtype=np.float32))


def round_along_policy(x, stage: Stage | str, policy: PrecisionPolicy):
    return round_to(x, policy.precision_for(stage))

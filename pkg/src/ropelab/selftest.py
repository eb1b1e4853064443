"""Built-in consistency checks run by ``ropelab selftest``.

* the bf16 codec over all 65,536 patterns;
* compiled plans against a brute-force visibility predicate on random layouts.
"""

from __future__ import annotations

import numpy as np

from .masks import BatchLayout, MaskScheme, Role, compile_plan, enumerate_pairs, interleave_chunks, layout_from_lengths
from .precision import decode_bf16_bits, encode_bf16_bits


def codec_check() -> tuple[bool, str]:
    bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    values = decode_bf16_bits(bits)
    finite = np.isfinite(values)
    back = encode_bf16_bits(values)
    ok_finite = np.array_equal(back[finite], bits[finite])
    inf = np.isinf(values)
    ok_inf = np.array_equal(back[inf], bits[inf])
    ok_nan = bool(np.isnan(decode_bf16_bits(back[np.isnan(values)])).all())
    ok = ok_finite and ok_inf and ok_nan
    return ok, f"bf16 codec: {int(finite.sum())} finite patterns round-trip={ok_finite}, inf={ok_inf}, nan={ok_nan}"


def visible(layout: BatchLayout, scheme: MaskScheme, i: int, j: int) -> bool:
    """Reference predicate, evaluated token by token."""
    if j > i:
        return False
    if scheme is MaskScheme.FULL_CAUSAL:
        return True
    qi, kj = layout.tokens[i], layout.tokens[j]
    if scheme.needs_anchor and kj.role is Role.ANCHOR:
        return True
    if qi.role is Role.ANCHOR or kj.role is Role.ANCHOR:
        return i == j
    return qi.doc_id == kj.doc_id


def random_layout(rng: np.random.Generator, scheme: MaskScheme, max_T: int = 64) -> BatchLayout:
    """A random valid layout with at most ``max_T`` tokens suitable for ``scheme``."""
    anchor = scheme.needs_anchor or bool(rng.integers(2))
    tags = scheme.uses_tags and bool(rng.integers(2))
    budget = max_T - int(anchor)
    lengths = []
    while budget > (1 + int(tags)):
        n = int(rng.integers(1, min(budget - int(tags), 16) + 1))
        lengths.append(n)
        budget -= n + int(tags)
        if rng.random() < 0.15:
            break
    if not lengths:
        lengths = [1]
    if scheme.interleaved:
        return interleave_chunks(lengths, int(rng.integers(1, 5)), anchor=anchor, rng=rng)
    return layout_from_lengths(lengths, anchor=anchor, tags=tags)


def enumeration_check(num_layouts: int = 500, seed: int = 0, max_T: int = 64) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(num_layouts):
        for scheme in MaskScheme:
            layout = random_layout(rng, scheme, max_T)
            plan = compile_plan(layout, scheme)
            expected = [(i, j) for i in range(layout.T) for j in range(i + 1) if visible(layout, scheme, i, j)]
            if enumerate_pairs(plan) != expected or plan.pair_count != len(expected):
                failures += 1
    total = num_layouts * len(MaskScheme)
    return failures == 0, f"mask enumeration: {total - failures}/{total} plans match the brute-force predicate"


def run_all(num_layouts: int = 500, seed: int = 0) -> list:
    return [codec_check(), enumeration_check(num_layouts, seed)]

"""Attention plans for packed windows: masks, position IDs and pair counts.

A :class:`BatchLayout` lists the tokens of one training window with their
role (shared anchor, domain tag or document token), document, chunk and
index inside the document. :func:`compile_plan` turns a layout and a
:class:`MaskScheme` into an :class:`AttentionPlan`: per-row sorted column
intervals, position IDs, a loss mask and the attended-pair count.

Visibility by scheme (always causal, ``j <= i``):

=====================  ===========================================  ===========
scheme                 key ``j`` visible from query ``i`` when       position id
=====================  ===========================================  ===========
full_causal            always                                       0..T-1
intra_doc              same document                                0..T-1
intra_doc_reset        same document                                restarts
anchor, anchor_tag     same document, or ``j`` is the anchor        0..T-1
interleaved_intra      same document (across chunk boundaries)      0..T-1
interleaved_anchor     same document, or ``j`` is the anchor        0..T-1
=====================  ===========================================  ===========

Tags count as tokens of the document they prefix. The anchor is its own
group, so under the intra-document schemes it only sees itself.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Role",
    "Token",
    "BatchLayout",
    "LayoutError",
    "MaskScheme",
    "AttentionPlan",
    "compile_plan",
    "enumerate_pairs",
    "full_causal_pairs",
    "pair_cost_ratio",
    "interleave_chunks",
    "pack_documents",
    "layout_from_lengths",
    "render_ascii",
    "read_layout_request",
    "LayoutRequest",
]

ANCHOR_DOC = -1


class LayoutError(ValueError):
    """A layout breaks an invariant or does not fit the requested scheme."""


class Role(str, enum.Enum):
    ANCHOR = "anchor"
    TAG = "tag"
    DOC = "doc"


class Token(NamedTuple):
    role: Role
    doc_id: int
    chunk_id: int = 0
    within_doc_index: int = 0
    domain: str | None = None


class MaskScheme(str, enum.Enum):
    FULL_CAUSAL = "full_causal"
    INTRA_DOC = "intra_doc"
    INTRA_DOC_RESET = "intra_doc_reset"
    ANCHOR = "anchor"
    ANCHOR_TAG = "anchor_tag"
    INTERLEAVED_INTRA = "interleaved_intra"
    INTERLEAVED_ANCHOR = "interleaved_anchor"

    @classmethod
    def parse(cls, value) -> "MaskScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown scheme {value!r}; expected one of {[s.value for s in cls]}"
            ) from None

    @property
    def needs_anchor(self) -> bool:
        return self in (MaskScheme.ANCHOR, MaskScheme.ANCHOR_TAG, MaskScheme.INTERLEAVED_ANCHOR)

    @property
    def uses_tags(self) -> bool:
        return self is MaskScheme.ANCHOR_TAG

    @property
    def interleaved(self) -> bool:
        return self in (MaskScheme.INTERLEAVED_INTRA, MaskScheme.INTERLEAVED_ANCHOR)

    @property
    def document_local(self) -> bool:
        return self is not MaskScheme.FULL_CAUSAL

    @property
    def resets_positions(self) -> bool:
        return self is MaskScheme.INTRA_DOC_RESET


@dataclass(frozen=True)
class BatchLayout:
    tokens: tuple
    window: int | None = None

    def __post_init__(self):
        toks = tuple(t if isinstance(t, Token) else Token(*t) for t in self.tokens)
        toks = tuple(t._replace(role=Role(t.role)) for t in toks)
        object.__setattr__(self, "tokens", toks)

    @property
    def T(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def has_anchor(self) -> bool:
        return bool(self.tokens) and self.tokens[0].role is Role.ANCHOR

    def doc_ids(self) -> np.ndarray:
        return np.array([t.doc_id for t in self.tokens], dtype=np.int64)

    def doc_lengths(self) -> dict:
        """Tokens per document, tags included, anchor excluded."""
        out: dict = {}
        for t in self.tokens:
            if t.role is not Role.ANCHOR:
                out[t.doc_id] = out.get(t.doc_id, 0) + 1
        return out

    def validate(self) -> "BatchLayout":
        seen_next: dict = {}
        last_chunk: dict = {}
        tagged: set = set()
        for pos, tok in enumerate(self.tokens):
            if tok.role is Role.ANCHOR:
                if pos != 0:
                    raise LayoutError(f"anchor token at index {pos}; only index 0 may hold the anchor")
                continue
            if tok.doc_id < 0:
                raise LayoutError(f"token {pos}: document ids must be >= 0")
            expected = seen_next.get(tok.doc_id, 0)
            if tok.within_doc_index != expected:
                raise LayoutError(
                    f"token {pos}: doc {tok.doc_id} index {tok.within_doc_index}, expected {expected}"
                )
            seen_next[tok.doc_id] = expected + 1
            chunk = last_chunk.get(tok.doc_id, 0)
            if tok.chunk_id < chunk:
                raise LayoutError(f"token {pos}: chunk ids of doc {tok.doc_id} go backwards")
            last_chunk[tok.doc_id] = tok.chunk_id
            if tok.role is Role.TAG:
                if expected != 0 or tok.doc_id in tagged:
                    raise LayoutError(f"token {pos}: a tag must be the first token of its document")
                nxt = self.tokens[pos + 1] if pos + 1 < len(self.tokens) else None
                if nxt is None or nxt.role is not Role.DOC or nxt.doc_id != tok.doc_id:
                    raise LayoutError(f"token {pos}: tag is not followed by its document")
                tagged.add(tok.doc_id)
        if self.window is not None and self.T > self.window:
            raise LayoutError(f"layout has {self.T} tokens, window holds {self.window}")
        return self

    def to_json(self) -> dict:
        out = {
            "T": self.T,
            "window": self.window,
            "roles": [t.role.value for t in self.tokens],
            "doc_ids": [t.doc_id for t in self.tokens],
            "chunk_ids": [t.chunk_id for t in self.tokens],
            "within_doc_index": [t.within_doc_index for t in self.tokens],
        }
        domains = [t.domain for t in self.tokens]
        if any(d is not None for d in domains):
            out["domains"] = domains
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "BatchLayout":
        n = len(obj["roles"])
        domains = obj.get("domains") or [None] * n
        tokens = [
            Token(Role(r), int(d), int(c), int(w), dom)
            for r, d, c, w, dom in zip(obj["roles"], obj["doc_ids"], obj["chunk_ids"],
                                       obj["within_doc_index"], domains)
        ]
        return cls(tuple(tokens), obj.get("window")).validate()


def layout_from_lengths(lengths: Sequence[int], anchor: bool = False, tags: bool = False,
                        doc_ids: Sequence[int] | None = None,
                        domains: Sequence[str | None] | None = None,
                        window: int | None = None) -> BatchLayout:
    """Contiguous documents, optionally behind an anchor and with domain tags."""
    ids = list(doc_ids) if doc_ids is not None else list(range(len(lengths)))
    doms = list(domains) if domains is not None else [None] * len(lengths)
    tokens = [Token(Role.ANCHOR, ANCHOR_DOC)] if anchor else []
    for doc, n, dom in zip(ids, lengths, doms):
        if n < 1:
            raise LayoutError("document lengths must be >= 1")
        offset = 0
        if tags:
            tokens.append(Token(Role.TAG, doc, 0, 0, dom))
            offset = 1
        tokens.extend(Token(Role.DOC, doc, 0, offset + w) for w in range(n))
    return BatchLayout(tuple(tokens), window).validate()


# -- plans -----------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionPlan:
    """Compiled block-sparse plan.

    Row ``i`` may attend to columns ``lo[s]..hi[s]`` (inclusive) for
    ``s`` in ``row_ptr[i]:row_ptr[i+1]``; intervals are sorted and disjoint.
    """

    T: int
    scheme: MaskScheme
    row_ptr: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    position_ids: np.ndarray
    loss_mask: np.ndarray
    pair_count: int

    def row_intervals(self, i: int) -> list:
        s, e = self.row_ptr[i], self.row_ptr[i + 1]
        return [[int(a), int(b)] for a, b in zip(self.lo[s:e], self.hi[s:e])]

    def allowed_matrix(self) -> np.ndarray:
        m = np.zeros((self.T, self.T), dtype=bool)
        for i in range(self.T):
            for s in range(self.row_ptr[i], self.row_ptr[i + 1]):
                m[i, self.lo[s] : self.hi[s] + 1] = True
        return m

    def is_full_causal(self) -> bool:
        return self.pair_count == self.T * (self.T + 1) // 2

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "scheme": self.scheme.value,
            "position_ids": [int(p) for p in self.position_ids],
            "loss_mask": [bool(m) for m in self.loss_mask],
            "rows": [{"i": i, "intervals": self.row_intervals(i)} for i in range(self.T)],
            "pair_count": int(self.pair_count),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttentionPlan":
        T = int(obj["T"])
        rows = sorted(obj["rows"], key=lambda r: r["i"])
        if [r["i"] for r in rows] != list(range(T)):
            raise ValueError("plan rows must cover 0..T-1 exactly once")
        row_ptr = [0]
        lo, hi = [], []
        for r in rows:
            for a, b in r["intervals"]:
                if not 0 <= a <= b <= r["i"]:
                    raise ValueError(f"row {r['i']}: interval {[a, b]} is not causal")
                lo.append(a)
                hi.append(b)
            row_ptr.append(len(lo))
        plan = cls(
            T=T,
            scheme=MaskScheme.parse(obj["scheme"]),
            row_ptr=np.array(row_ptr, dtype=np.int64),
            lo=np.array(lo, dtype=np.int64),
            hi=np.array(hi, dtype=np.int64),
            position_ids=np.array(obj["position_ids"], dtype=np.int64),
            loss_mask=np.array(obj["loss_mask"], dtype=bool),
            pair_count=int(obj["pair_count"]),
        )
        if plan.pair_count != int((plan.hi - plan.lo + 1).sum()):
            raise ValueError("pair_count does not match the intervals")
        return plan


def _runs(positions: list) -> list:
    runs = []
    for p in positions:
        if runs and runs[-1][1] == p - 1:
            runs[-1][1] = p
        else:
            runs.append([p, p])
    return runs


def _merge(intervals: list) -> list:
    intervals.sort()
    merged = []
    for a, b in intervals:
        if merged and a <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return merged


def compile_plan(layout: BatchLayout, scheme: MaskScheme | str) -> AttentionPlan:
    scheme = MaskScheme.parse(scheme)
    layout.validate()
    T = layout.T
    if scheme.needs_anchor and not layout.has_anchor:
        raise LayoutError(f"scheme {scheme.value} needs an anchor token at index 0")

    groups: dict = {}
    for pos, tok in enumerate(layout.tokens):
        key = ANCHOR_DOC if tok.role is Role.ANCHOR else tok.doc_id
        groups.setdefault(key, []).append(pos)
    group_runs = {g: _runs(p) for g, p in groups.items()}

    row_ptr = [0]
    lo: list = []
    hi: list = []
    anchor_visible = scheme.needs_anchor and layout.has_anchor
    for i, tok in enumerate(layout.tokens):
        if not scheme.document_local:
            intervals = [[0, i]]
        else:
            key = ANCHOR_DOC if tok.role is Role.ANCHOR else tok.doc_id
            intervals = []
            for a, b in group_runs[key]:
                if a > i:
                    break
                intervals.append([a, min(b, i)])
            if anchor_visible and i > 0:
                intervals.append([0, 0])
            intervals = _merge(intervals)
        for a, b in intervals:
            lo.append(a)
            hi.append(b)
        row_ptr.append(len(lo))

    lo_arr = np.array(lo, dtype=np.int64)
    hi_arr = np.array(hi, dtype=np.int64)
    if scheme.resets_positions:
        position_ids = np.array([t.within_doc_index for t in layout.tokens], dtype=np.int64)
    else:
        position_ids = np.arange(T, dtype=np.int64)
    loss_mask = np.array([t.role is Role.DOC for t in layout.tokens], dtype=bool)
    return AttentionPlan(
        T=T,
        scheme=scheme,
        row_ptr=np.array(row_ptr, dtype=np.int64),
        lo=lo_arr,
        hi=hi_arr,
        position_ids=position_ids,
        loss_mask=loss_mask,
        pair_count=int((hi_arr - lo_arr + 1).sum()),
    )


def enumerate_pairs(plan: AttentionPlan) -> list:
    """Every allowed ``(i, j)``, sorted."""
    return [
        (i, j)
        for i in range(plan.T)
        for s in range(plan.row_ptr[i], plan.row_ptr[i + 1])
        for j in range(int(plan.lo[s]), int(plan.hi[s]) + 1)
    ]


def full_causal_pairs(T: int) -> int:
    return T * (T + 1) // 2


def pair_cost_ratio(layout: BatchLayout, scheme: MaskScheme | str) -> float:
    """Attended pairs under ``scheme`` relative to full causal attention."""
    if layout.T == 0:
        raise LayoutError("empty layout")
    return compile_plan(layout, scheme).pair_count / full_causal_pairs(layout.T)


# -- layout construction ---------------------------------------------------------------


def _split_points(rng: np.random.Generator, n: int, max_chunks: int) -> list:
    k = int(rng.integers(1, min(max_chunks, n) + 1))
    cuts = sorted(rng.choice(np.arange(1, n), size=k - 1, replace=False).tolist()) if k > 1 else []
    bounds = [0, *cuts, n]
    return [bounds[t + 1] - bounds[t] for t in range(k)]


def interleave_chunks(docs: Sequence, max_chunks: int = 4, seed: int | None = 0, *,
                      anchor: bool = False, doc_ids: Sequence[int] | None = None,
                      rng: np.random.Generator | None = None) -> BatchLayout:
    """Split documents at random points and randomly merge the chunk streams.

    ``docs`` holds token sequences (or plain lengths). Each document is cut
    into between 1 and ``max_chunks`` chunks at distinct uniform split
    points; the streams are then merged so that every interleaving of the
    chunks that keeps each document's order is equally likely.
    """
    if max_chunks < 1:
        raise ValueError("max_chunks must be >= 1")
    if len(docs) == 0:
        raise ValueError("need at least one document")
    if rng is None:
        rng = np.random.default_rng(seed)
    lengths = [d if isinstance(d, (int, np.integer)) else len(d) for d in docs]
    if any(n < 1 for n in lengths):
        raise LayoutError("document lengths must be >= 1")
    ids = list(doc_ids) if doc_ids is not None else list(range(len(lengths)))

    streams = [_split_points(rng, n, max_chunks) for n in lengths]
    cursor = [0] * len(streams)
    written = [0] * len(streams)
    tokens = [Token(Role.ANCHOR, ANCHOR_DOC)] if anchor else []
    remaining = np.array([len(s) for s in streams], dtype=np.int64)
    while remaining.sum():
        d = int(rng.choice(len(streams), p=remaining / remaining.sum()))
        c = cursor[d]
        for _ in range(streams[d][c]):
            tokens.append(Token(Role.DOC, ids[d], c, written[d]))
            written[d] += 1
        cursor[d] += 1
        remaining[d] -= 1
    return BatchLayout(tuple(tokens)).validate()


def pack_documents(doc_lengths: Sequence[int], T: int, scheme: MaskScheme | str = MaskScheme.ANCHOR, *,
                   doc_ids: Sequence[int] | None = None,
                   domains: Sequence[str | None] | None = None,
                   max_chunks: int = 4, seed: int = 0) -> list:
    """Greedy in-order packing of documents into windows of ``T`` tokens.

    A document that does not fit in what is left of a window is cut at the
    boundary and continues at the start of the next window. Windows get an
    anchor and per-document tags when ``scheme`` needs them; interleaved
    schemes shuffle the pieces of each window with :func:`interleave_chunks`.
    """
    scheme = MaskScheme.parse(scheme)
    lengths = [int(n) for n in doc_lengths]
    if any(n < 1 for n in lengths):
        raise LayoutError("document lengths must be >= 1")
    ids = list(doc_ids) if doc_ids is not None else list(range(len(lengths)))
    doms = list(domains) if domains is not None else [None] * len(lengths)
    anchor = scheme.needs_anchor
    tag_cost = 1 if scheme.uses_tags else 0
    min_window = 1 + int(anchor) + tag_cost
    if T < max(2, min_window):
        raise LayoutError(f"window {T} is too small for scheme {scheme.value}")
    if not lengths:
        return []

    rng = np.random.default_rng(seed)
    capacity = T - int(anchor)
    windows: list = []
    current: list = []
    room = capacity

    def flush():
        nonlocal current, room
        if current:
            windows.append(current)
        current, room = [], capacity

    for doc, n, dom in zip(ids, lengths, doms):
        left = n
        while left:
            if room < tag_cost + 1:
                flush()
            take = min(left, room - tag_cost)
            current.append((doc, take, dom))
            room -= take + tag_cost
            left -= take
    flush()

    layouts = []
    for pieces in windows:
        if scheme.interleaved:
            layout = interleave_chunks([p[1] for p in pieces], max_chunks, anchor=anchor,
                                       doc_ids=[p[0] for p in pieces], rng=rng)
            layouts.append(BatchLayout(layout.tokens, T).validate())
        else:
            layouts.append(layout_from_lengths(
                [p[1] for p in pieces], anchor=anchor, tags=bool(tag_cost),
                doc_ids=[p[0] for p in pieces], domains=[p[2] for p in pieces], window=T,
            ))
    return layouts


def render_ascii(plan: AttentionPlan, mark: str = "#", blank: str = ".") -> str:
    """One text row per query; ``mark`` where the key is visible."""
    allowed = plan.allowed_matrix()
    return "\n".join("".join(mark if a else blank for a in row) for row in allowed)


# -- JSON layout requests ---------------------------------------------------------------


@dataclass(frozen=True)
class LayoutRequest:
    window: int
    lengths: tuple
    doc_ids: tuple
    domains: tuple
    scheme: MaskScheme
    seed: int = 0

    def layouts(self, max_chunks: int = 4) -> list:
        return pack_documents(self.lengths, self.window, self.scheme, doc_ids=self.doc_ids,
                              domains=self.domains, max_chunks=max_chunks, seed=self.seed)


_REQUEST_KEYS = {"window", "docs", "scheme", "seed"}
_DOC_KEYS = {"id", "len", "domain"}


def read_layout_request(source) -> LayoutRequest:
    """Parse ``{"window", "docs": [{"id", "len", "domain"?}], "scheme", "seed"}``.

    ``source`` is a path, a JSON string or an already-decoded dict.
    """
    if isinstance(source, dict):
        obj = source
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            obj = json.loads(text)
        else:
            with open(text, encoding="utf-8") as fh:
                obj = json.load(fh)
    unknown = set(obj) - _REQUEST_KEYS
    if unknown:
        raise ValueError(f"unknown layout keys: {sorted(unknown)}")
    docs = obj.get("docs", [])
    for d in docs:
        bad = set(d) - _DOC_KEYS
        if bad:
            raise ValueError(f"unknown document keys: {sorted(bad)}")
    return LayoutRequest(
        window=int(obj["window"]),
        lengths=tuple(int(d["len"]) for d in docs),
        doc_ids=tuple(int(d.get("id", k)) for k, d in enumerate(docs)),
        domains=tuple(d.get("domain") for d in docs),
        scheme=MaskScheme.parse(obj.get("scheme", "anchor")),
        seed=int(obj.get("seed", 0)),
    )

"""Streaming chunker (reading view) and BM25 index over retrieval units.

The same document is tiled twice: coarse streaming chunks drive sequential
reading, fine retrieval units back an Okapi BM25 index for global in-document
lookup. Both tilings are exact: concatenating segment texts in order
reproduces the document byte for byte.

Index tokenization (lowercase, split on non-alphanumeric) is deliberately
independent of the budget TokenCounter so retrieval quality does not depend
on how budgets are approximated.
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .budget import TokenCounter, count_tokens, truncate_to_budget

_WORD_RE = re.compile(r"\S+")
_INDEX_TOKEN_RE = re.compile(r"[a-z0-9]+")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_UNIT_TOKENS = 500


@dataclass(frozen=True)
class StreamChunk:
    index: int
    text: str
    start: int
    end: int
    token_count: int


@dataclass(frozen=True)
class RetrievalUnit:
    unit_id: int
    text: str
    start: int
    end: int
    token_count: int


@dataclass(frozen=True)
class ScoredUnit:
    unit_id: int
    score: float


def index_tokens(text: str) -> list[str]:
    """Lowercased alphanumeric terms; the index-side tokenization."""
    return _INDEX_TOKEN_RE.findall(text.lower())


def _tile_spans(text: str, budget: int, counter: TokenCounter) -> list[tuple[int, int]]:
    """Non-overlapping spans covering [0, len(text)), each within ``budget`` tokens.

    Cut points fall on word starts so inter-word whitespace stays with the
    preceding segment; a single word larger than the budget is split at char
    granularity (the only case where a boundary is not on whitespace).
    """
    if budget <= 0:
        raise ValueError(f"budget must be > 0, got {budget}")
    if not text:
        return []
    word_starts = [m.start() for m in _WORD_RE.finditer(text)]
    spans: list[tuple[int, int]] = []
    pos = 0
    while pos < len(text):
        first = bisect.bisect_right(word_starts, pos)
        n_cuts = len(word_starts) - first + 1

        def cut_at(i: int) -> int:
            return word_starts[first + i] if first + i < len(word_starts) else len(text)

        def fits(i: int) -> bool:
            return count_tokens(text[pos : cut_at(i)], counter) <= budget

        if not fits(0):
            # Oversized head word (or whitespace run): char-level split.
            limit = cut_at(0)
            lo, hi, best = pos + 1, limit, pos + 1
            while lo <= hi:
                mid = (lo + hi) // 2
                if count_tokens(text[pos:mid], counter) <= budget:
                    best = mid
                    lo = mid + 1
                else:
                    hi = mid - 1
        else:
            # Gallop then bisect; probe cost stays proportional to chunk size.
            lo, hi = 0, 1
            while True:
                idx = min(hi, n_cuts - 1)
                if fits(idx):
                    lo = idx
                    if idx == n_cuts - 1:
                        break
                    hi *= 2
                else:
                    hi = idx
                    break
            if lo < n_cuts - 1:
                while hi - lo > 1:
                    mid = (lo + hi) // 2
                    if fits(mid):
                        lo = mid
                    else:
                        hi = mid
            best = cut_at(lo)
        spans.append((pos, best))
        pos = best
    return spans


def segment_stream(long_text: str, chunk_budget: int, counter: TokenCounter) -> list[StreamChunk]:
    """Coarse sequential reading view; default budget is the recurrent chunk size."""
    return [
        StreamChunk(index=i, text=long_text[s:e], start=s, end=e, token_count=count_tokens(long_text[s:e], counter))
        for i, (s, e) in enumerate(_tile_spans(long_text, chunk_budget, counter))
    ]


def build_units(long_text: str, unit_budget: int, counter: TokenCounter) -> list[RetrievalUnit]:
    """Fine-grained retrieval view; default budget 500 tokens."""
    return [
        RetrievalUnit(unit_id=i, text=long_text[s:e], start=s, end=e, token_count=count_tokens(long_text[s:e], counter))
        for i, (s, e) in enumerate(_tile_spans(long_text, unit_budget, counter))
    ]


@dataclass
class Bm25Index:
    unit_count: int
    doc_freq: dict[str, int]
    term_freqs: list[dict[str, int]]
    lengths: list[int]
    spans: list[tuple[int, int]]
    avg_length: float
    k1: float
    b: float


def build_index(units: Sequence[RetrievalUnit], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    """Okapi BM25 statistics over the units' index-tokenized texts."""
    if not units:
        raise ValueError("cannot build an index over zero units")
    if k1 <= 0 or b <= 0:
        raise ValueError(f"k1 and b must be > 0, got k1={k1}, b={b}")
    term_freqs: list[dict[str, int]] = []
    doc_freq: dict[str, int] = {}
    lengths: list[int] = []
    for unit in units:
        tokens = index_tokens(unit.text)
        tf: dict[str, int] = {}
        for tok in tokens:
            tf[tok] = tf.get(tok, 0) + 1
        for term in tf:
            doc_freq[term] = doc_freq.get(term, 0) + 1
        term_freqs.append(tf)
        lengths.append(len(tokens))
    return Bm25Index(
        unit_count=len(units),
        doc_freq=doc_freq,
        term_freqs=term_freqs,
        lengths=lengths,
        spans=[(u.start, u.end) for u in units],
        avg_length=sum(lengths) / len(units),
        k1=k1,
        b=b,
    )


def _spans_intersect(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def query_index(
    index: Bm25Index,
    query: str,
    k: int,
    exclude_span: tuple[int, int] | None = None,
    scope_end: int | None = None,
) -> list[ScoredUnit]:
    """Top-k units by Okapi BM25 score, ties broken by ascending unit id.

    idf = ln((N - df + 0.5) / (df + 0.5) + 1), summed per query token
    occurrence. Units whose char span intersects ``exclude_span`` are
    skipped, as are units past ``scope_end`` when retrieval is restricted
    to the already-streamed prefix. Zero-score units are never returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = index_tokens(query)
    if not terms or index.avg_length == 0:
        return []
    scored: list[ScoredUnit] = []
    for unit_id in range(index.unit_count):
        span = index.spans[unit_id]
        if exclude_span is not None and _spans_intersect(span, exclude_span):
            continue
        if scope_end is not None and span[1] > scope_end:
            continue
        tf = index.term_freqs[unit_id]
        norm = index.k1 * (1 - index.b + index.b * index.lengths[unit_id] / index.avg_length)
        score = 0.0
        for term in terms:
            freq = tf.get(term, 0)
            if freq == 0:
                continue
            df = index.doc_freq[term]
            idf = math.log((index.unit_count - df + 0.5) / (df + 0.5) + 1)
            score += idf * freq * (index.k1 + 1) / (freq + norm)
        if score > 0.0:
            scored.append(ScoredUnit(unit_id=unit_id, score=score))
    scored.sort(key=lambda s: (-s.score, s.unit_id))
    return scored[:k]


def concat_retrieved(
    hits: Sequence[ScoredUnit],
    units: Mapping[int, RetrievalUnit] | Sequence[RetrievalUnit],
    cap: int,
    counter: TokenCounter,
) -> str:
    """Join hit units in score order under ``cap`` tokens, keeping provenance.

    Whole trailing units are dropped to fit; if even the first unit exceeds
    the cap it is truncated at a word boundary.
    """
    if not hits:
        return ""
    by_id = units if isinstance(units, Mapping) else {u.unit_id: u for u in units}
    blocks: list[str] = []
    for hit in hits:
        if hit.unit_id not in by_id:
            raise KeyError(f"hit references unknown unit id {hit.unit_id}")
        block = f"[Unit {hit.unit_id}]\n{by_id[hit.unit_id].text}"
        candidate = "\n\n".join(blocks + [block])
        if count_tokens(candidate, counter) <= cap:
            blocks.append(block)
        elif not blocks:
            return truncate_to_budget(block, cap, counter, boundary="word")
        else:
            break
    return "\n\n".join(blocks)

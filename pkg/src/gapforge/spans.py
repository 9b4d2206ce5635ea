"""Candidate span enumeration and gold labelling over tokenized text."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .corpus import GapAnnotation

logger = logging.getLogger(__name__)

DEFAULT_MAX_WIDTH = 12


class Span(NamedTuple):
    """Token interval, both ends inclusive."""

    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start + 1


@dataclass
class TokenizedText:
    token_ids: list[int]
    offsets: list[tuple[int, int]]
    text: str = ""
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.token_ids) != len(self.offsets):
            raise ValueError("token_ids and offsets differ in length")
        prev = 0
        for s, e in self.offsets:
            if s < prev or e < s:
                raise ValueError(f"offsets must be non-overlapping and increasing, got {(s, e)}")
            prev = e

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)

    def truncated(self, n: int) -> "TokenizedText":
        return TokenizedText(self.token_ids[:n], self.offsets[:n], self.text, self.tokens[:n])

    def char_span(self, span: Span) -> tuple[int, int]:
        return self.offsets[span.start][0], self.offsets[span.end][1]


def span_count(n_tokens: int, max_width: int) -> int:
    w = min(max_width, n_tokens)
    return w * (n_tokens + 1) - w * (w + 1) // 2


def enumerate_spans(n_tokens: int, max_width: int = DEFAULT_MAX_WIDTH) -> list[Span]:
    if n_tokens < 0 or max_width < 1:
        raise ValueError("need n_tokens >= 0 and max_width >= 1")
    return [Span(s, s + w - 1)
            for s in range(n_tokens)
            for w in range(1, min(max_width, n_tokens - s) + 1)]


def span_arrays(n_tokens: int, max_width: int = DEFAULT_MAX_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Starts and ends of ``enumerate_spans`` as int64 arrays, same order."""
    starts = np.repeat(np.arange(n_tokens), [min(max_width, n_tokens - s) for s in range(n_tokens)])
    first = np.searchsorted(starts, starts)  # index of each start's first span
    ends = starts + (np.arange(len(starts)) - first)
    return starts.astype(np.int64), ends.astype(np.int64)


def covering_span(tok: TokenizedText, start_char: int, end_char: int) -> Span | None:
    """Smallest token span whose offsets cover ``[start_char, end_char)``.

    Tokens partially overlapping the interval are included whole. Returns None
    when no token intersects the interval.
    """
    ends = [e for _, e in tok.offsets]
    starts = [s for s, _ in tok.offsets]
    first = bisect.bisect_right(ends, start_char)  # first token ending after start_char
    last = bisect.bisect_left(starts, end_char) - 1  # last token starting before end_char
    if first >= tok.n_tokens or last < first:
        return None
    return Span(first, last)


def project_gaps(tok: TokenizedText, gaps: Iterable[GapAnnotation],
                 max_width: int = DEFAULT_MAX_WIDTH,
                 overflow: list[GapAnnotation] | None = None) -> set[Span]:
    """Gold spans for ``gaps``.

    Gaps whose covering span is wider than ``max_width`` (or that touch no
    token) cannot be predicted; they are left out and appended to
    ``overflow`` when a list is supplied.
    """
    gold: set[Span] = set()
    dropped = 0
    for g in gaps:
        span = covering_span(tok, g.start, g.end)
        if span is None or span.width > max_width:
            dropped += 1
            if overflow is not None:
                overflow.append(g)
            continue
        gold.add(span)
    if dropped:
        logger.warning("AlignmentOverflow: %d gap(s) not representable with max_width=%d",
                       dropped, max_width)
    return gold


def label_spans(candidates: Sequence[Span], gold: set[Span]) -> np.ndarray:
    labels = np.fromiter((s in gold for s in candidates), dtype=np.float32, count=len(candidates))
    missing = len(gold) - int(labels.sum())
    if missing:
        logger.debug("%d gold span(s) outside the candidate set", missing)
    return labels

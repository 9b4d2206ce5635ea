from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapforge.corpus import GapAnnotation
from gapforge.spans import (Span, TokenizedText, covering_span, enumerate_spans, label_spans,
                            project_gaps, span_arrays, span_count)


def brute_force_spans(n, w):
    return [(s, e) for s in range(n) for e in range(s, n) if e - s + 1 <= w]


def test_enumerate_examples():
    assert enumerate_spans(1, 12) == [Span(0, 0)]
    five = enumerate_spans(5, 2)
    assert len(five) == 9 == len(brute_force_spans(5, 2))
    assert sum(s.width == 1 for s in five) == 5 and sum(s.width == 2 for s in five) == 4
    assert len(enumerate_spans(20, 12)) == sum(21 - w for w in range(1, 13)) == 174
    assert enumerate_spans(0, 3) == []


@pytest.mark.parametrize("n", range(0, 65, 7))
@pytest.mark.parametrize("w", [1, 2, 5, 12])
def test_enumeration_order_unique_and_arrays(n, w):
    spans = enumerate_spans(n, w)
    assert [tuple(s) for s in spans] == sorted(brute_force_spans(n, w), key=lambda s: (s[0], s[1] - s[0]))
    assert len(set(spans)) == len(spans) == span_count(n, w)
    starts, ends = span_arrays(n, w)
    assert list(zip(starts.tolist(), ends.tolist())) == [tuple(s) for s in spans]


def test_enumerate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        enumerate_spans(3, 0)


def _tok(offsets):
    return TokenizedText(list(range(len(offsets))), offsets)


def test_project_exact_token():
    tok = _tok([(0, 2), (3, 7), (8, 15)])
    assert project_gaps(tok, [GapAnnotation(3, 7, "suis")]) == {Span(1, 1)}
    assert project_gaps(tok, []) == set()


def test_project_ragged_subwords():
    # "le grand_chat mange bien": tokens 3-5 are sub-pieces of one word
    offsets = [(0, 2), (3, 8), (9, 11), (11, 13), (13, 15), (16, 21)]
    tok = _tok(offsets)
    gap = GapAnnotation(10, 14, "x" * 4)  # starts inside token 2, ends inside token 4
    # oracle: tokens whose interval intersects the gap
    hit = [i for i, (s, e) in enumerate(offsets) if s < gap.end and e > gap.start]
    assert project_gaps(tok, [gap]) == {Span(hit[0], hit[-1])} == {Span(2, 4)}


def test_project_overflow_is_reported():
    tok = _tok([(i, i + 1) for i in range(0, 40, 2)])
    overflow = []
    gold = project_gaps(tok, [GapAnnotation(0, 30, "x" * 30), GapAnnotation(32, 33, "y")], 12, overflow)
    assert gold == {Span(16, 16)}
    assert [g.answer for g in overflow] == ["x" * 30]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 4)), min_size=1, max_size=12),
       st.data())
def test_projection_is_minimal_cover(layout, data):
    offsets, pos = [], 0
    for gap_before, length in layout:
        pos += gap_before
        offsets.append((pos, pos + length))
        pos += length
    tok = _tok(offsets)
    start = data.draw(st.integers(0, pos - 1))
    end = data.draw(st.integers(start + 1, pos))
    span = covering_span(tok, start, end)
    touching = [i for i, (s, e) in enumerate(offsets) if s < end and e > start]
    if not touching:
        assert span is None
        return
    assert span is not None
    s_char, e_char = tok.char_span(span)
    chars = set(range(start, end)) - {c for c in range(start, end)
                                      if not any(s <= c < e for s, e in offsets)}
    assert all(s_char <= c < e_char for c in chars)
    # no strictly smaller span covers every token-covered character of the gap
    for a, b in brute_force_spans(len(offsets), len(offsets)):
        if (a, b) == tuple(span) or not (span.start <= a and b <= span.end):
            continue
        lo, hi = offsets[a][0], offsets[b][1]
        assert not all(lo <= c < hi for c in chars)


def test_label_examples():
    cands = enumerate_spans(5, 2)
    assert label_spans(cands, set()).sum() == 0
    assert label_spans(cands, set(cands)).tolist() == [1.0] * len(cands)
    gold = {Span(1, 1), Span(3, 4)}
    labels = label_spans(cands, gold)
    assert [c for c, y in zip(cands, labels) if y] == [Span(1, 1), Span(3, 4)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20), st.integers(1, 12), st.sets(st.tuples(st.integers(0, 25), st.integers(0, 12))))
def test_label_sum_equals_intersection(n, w, raw):
    cands = enumerate_spans(n, w)
    gold = {Span(s, s + d) for s, d in raw}
    assert label_spans(cands, gold).sum() == len(gold & set(cands))


def test_tokenized_text_validates_offsets():
    with pytest.raises(ValueError):
        TokenizedText([1, 2], [(0, 3), (2, 4)])
    with pytest.raises(ValueError):
        TokenizedText([1], [(0, 1), (2, 3)])

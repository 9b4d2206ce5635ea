from __future__ import annotations

import json
import os
from html.parser import HTMLParser

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapforge.corpus import (TENSES, ExerciseDocument, GapAnnotation, TenseLabel, compute_stats,
                             join_sentences, load_corpus, make_gap, parse_marked_text,
                             render_marked_text, render_student_view, save_corpus, sentence_spans,
                             sentence_split, strip_markup)
from gapforge.errors import EmptyGap, NestedMarkers, SchemaViolation, UnbalancedMarkers


def test_parse_single_gap():
    doc = parse_marked_text("Je [[suis]] content.", "x")
    assert doc.text == "Je suis content."
    assert doc.gaps == (GapAnnotation(3, 7, "suis"),)


def test_parse_without_markers_is_identity():
    doc = parse_marked_text("Pas de gap.", "x")
    assert doc.text == "Pas de gap." and doc.gaps == ()


def test_parse_two_gaps_matches_brute_force_scan():
    marked = "Il [[a]] dit qu'il [[viendrait]]."
    doc = parse_marked_text(marked)
    stripped = marked.replace("[[", "").replace("]]", "")
    # oracle: locate each answer left to right in the stripped string
    expected, pos = [], 0
    for answer in ("a", "viendrait"):
        start = stripped.index(answer, pos)
        while stripped[start - 1].isalpha():  # skip matches inside other words
            start = stripped.index(answer, start + 1)
        expected.append((start, start + len(answer), answer))
        pos = start + len(answer)
    assert [(g.start, g.end, g.answer) for g in doc.gaps] == expected == [(3, 4, "a"), (15, 24, "viendrait")]


@pytest.mark.parametrize("marked, error", [
    ("a [[b c", UnbalancedMarkers),
    ("a b]] c", UnbalancedMarkers),
    ("a [[b [[c]] d]]", NestedMarkers),
    ("a [[]] b", EmptyGap),
])
def test_parse_errors(marked, error):
    with pytest.raises(error):
        parse_marked_text(marked)


def test_render_examples():
    assert render_marked_text(ExerciseDocument("x", "Texte brut.")) == "Texte brut."
    doc = ExerciseDocument("x", "Je suis content.", (make_gap("Je suis content.", 3, 7),))
    assert render_marked_text(doc) == "Je [[suis]] content."


alphabet = st.characters(blacklist_characters="[]", blacklist_categories=("Cs",))


@st.composite
def documents(draw):
    text = draw(st.text(alphabet, min_size=0, max_size=60))
    cuts = sorted(draw(st.sets(st.integers(0, len(text)), max_size=8)))
    gaps = []
    for s, e in zip(cuts[::2], cuts[1::2]):
        if e > s:
            gaps.append(make_gap(text, s, e, draw(st.sampled_from([None, "PC", "IM", "adverb"]))))
    split = draw(st.sampled_from(["train", "dev", "test", "unassigned"]))
    doc_id = draw(st.text(min_size=1, max_size=8))
    return ExerciseDocument(doc_id, text, tuple(gaps), split).validate()


@settings(max_examples=100, deadline=None)
@given(documents())
def test_marker_round_trip(doc):
    back = parse_marked_text(render_marked_text(doc), doc.id, doc.split, [g.gap_type for g in doc.gaps])
    assert back == doc


def test_student_view():
    doc = parse_marked_text("Je [[suis]] content.")
    assert render_student_view(doc, "____") == "Je ____ content."
    assert render_student_view(ExerciseDocument("x", "Rien."), "__") == "Rien."
    two = parse_marked_text("Il [[a]] dit qu'il [[viendrait]].")
    # oracle: rebuild by slicing around the offsets right to left
    expected = two.text
    for g in reversed(two.gaps):
        expected = expected[:g.start] + "..." + expected[g.end:]
    assert render_student_view(two, "...") == expected == "Il ... dit qu'il ...."
    with pytest.raises(ValueError):
        render_student_view(two, "[[x]]")


class _Reference(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts = []

    def handle_data(self, data):
        self.parts.append(data)


def reference_strip(raw: str) -> str:
    p = _Reference()
    p.feed(raw)
    p.close()
    return " ".join("".join(p.parts).split())


@pytest.mark.parametrize("raw, expected", [
    ("<p>Bonjour</p>", "Bonjour"),
    ("a &amp; b", "a & b"),
    ("<b>Il [[a]]  ri</b>", "Il [[a]] ri"),
])
def test_strip_markup_examples(raw, expected):
    assert strip_markup(raw) == expected


@pytest.mark.parametrize("raw", [
    "<b>Il [[a]]  ri</b>",
    '<span class="x">Elle  <i>[[chantait]]</i> &eacute;t&eacute;</span>',
    "<div>Un <em>mot</em>&nbsp;de plus</div>",
])
def test_strip_markup_agrees_with_reference_parser(raw):
    assert strip_markup(raw) == reference_strip(raw)


def test_strip_markup_drops_scripts_and_separates_blocks():
    assert strip_markup("<script>var x;</script><p>Un</p><p>Deux</p>") == "Un Deux"


def test_sentence_split_single_sentence_is_identity():
    doc = parse_marked_text("Je [[suis]] content.", "x")
    assert sentence_split(doc) == [doc]


def test_sentence_split_shifts_offsets():
    doc = parse_marked_text("A. Le [[chat]] dort.", "x")
    first, second = sentence_split(doc)
    assert first.text == "A." and first.gaps == ()
    assert second.text == "Le chat dort."
    # offset arithmetic: the second sentence starts at len("A. ") = 3
    assert second.gaps[0].start == doc.gaps[0].start - 3 == 3
    assert second.text[second.gaps[0].start:second.gaps[0].end] == "chat"


def test_sentence_split_merges_boundary_inside_gap():
    doc = parse_marked_text("Il [[part. Elle]] reste.", "x")
    assert len(sentence_split(doc)) == 1


def test_sentence_split_french_abbreviations():
    assert len(sentence_spans("M. Dupont arrive. Mme. Martin part.")) == 2
    assert len(sentence_spans("Il dit : « Oui. » Puis il part ! Ensuite ?")) == 3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["Le chat", "Il", "Nous", "M. Paul", "Elle"]),
                          st.sampled_from(["dort", "a mangé", "viendra", "est là"]),
                          st.sampled_from([".", "!", "?", "…"]), st.booleans()),
                min_size=1, max_size=6))
def test_sentence_split_conserves_gaps_and_text(parts):
    marked = " ".join(f"{s} [[{v}]]{p}" if gap else f"{s} {v}{p}" for s, v, p, gap in parts)
    doc = parse_marked_text(marked, "x")
    spans = sentence_spans(doc.text, doc.gaps)
    sents = sentence_split(doc)
    assert sum(len(s.gaps) for s in sents) == len(doc.gaps)
    # every output gap maps back to exactly one input gap
    mapped = [g.shifted(start) for (start, _), s in zip(spans, sents) for g in s.gaps]
    assert [(g.start, g.end, g.answer) for g in mapped] == [(g.start, g.end, g.answer) for g in doc.gaps]
    # text is rebuilt from the sentences and whitespace separators
    rebuilt = doc.text[:spans[0][0]]
    for i, ((s, e), sent) in enumerate(zip(spans, sents)):
        assert doc.text[s:e] == sent.text
        nxt = spans[i + 1][0] if i + 1 < len(spans) else len(doc.text)
        assert doc.text[e:nxt].strip() == ""
        rebuilt += sent.text + doc.text[e:nxt]
    assert rebuilt == doc.text


def test_join_sentences_inverts_split():
    doc = parse_marked_text("Je [[suis]] là. Tu [[es]] ici. Il [[est]] parti.", "x")
    assert join_sentences(sentence_split(doc), "x").gaps == doc.gaps


def test_tense_labels_are_bijective():
    assert len(TENSES) == 12
    assert len({t.full_name for t in TenseLabel}) == 12
    for t in TenseLabel:
        assert TenseLabel.parse(t.full_name) is t is TenseLabel.parse(t.abbreviation)


def test_compute_stats_empty():
    stats = compute_stats([])
    assert stats.n_documents == {} and stats.n_gaps == {} and stats.per_tense == {}


def test_compute_stats_totals_are_sums():
    docs = [
        parse_marked_text("Je [[suis]]. Tu [[es]].", "a", "train"),
        parse_marked_text("Il [[était]] là. Il [[venait]].", "b", "dev", ["IM", "Imparfait"]),
        parse_marked_text("Nous [[irons]].", "c", "test", ["FS"]),
        parse_marked_text("Vous [[êtes]] ici.", "d", "test", ["adjective"]),
    ]
    stats = compute_stats(docs)
    assert stats.n_documents == {"train": 1, "dev": 1, "test": 2}
    assert stats.n_sentences == {"train": 2, "dev": 2, "test": 2}
    assert stats.n_gaps == {"train": 2, "dev": 2, "test": 2}
    assert stats.per_tense["dev"]["IM"] == 2
    assert stats.per_tense["test"]["FS"] == 1 and sum(stats.per_tense["test"].values()) == 1
    assert "train" not in stats.per_tense
    table = stats.format_table()
    assert "# Documents" in table and "Imparfait (IM)" in table and "UNK" in table


def test_jsonl_round_trip(tmp_path):
    docs = [
        parse_marked_text("Je [[suis]] content.", "a", "train"),
        parse_marked_text("Il [[était]] là. Elle [[chante]].", "b", "dev", ["IM", "IP"]),
        ExerciseDocument("c", "Aucun trou ici.", (), "test"),
    ]
    path = tmp_path / "corpus.jsonl"
    save_corpus(docs, path)
    assert load_corpus(path) == docs
    rec = json.loads(path.read_text(encoding="utf-8").splitlines()[1])
    assert set(rec) == {"id", "text", "split", "gaps"}
    assert set(rec["gaps"][0]) == {"start", "end", "answer", "gap_type"}


@settings(max_examples=100, deadline=None)
@given(st.lists(documents(), min_size=1, max_size=5, unique_by=lambda d: d.id))
def test_jsonl_round_trip_random(tmp_path_factory, docs):
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    save_corpus(docs, path)
    assert load_corpus(path) == docs


def _write(tmp_path, records):
    path = tmp_path / "bad.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_load_rejects_offsets_past_text(tmp_path):
    path = _write(tmp_path, [{"id": "x", "text": "abc", "split": "train",
                              "gaps": [{"start": 1, "end": 9, "answer": "bc", "gap_type": None}]}])
    with pytest.raises(SchemaViolation) as err:
        load_corpus(path)
    assert err.value.doc_id == "x" and err.value.field == "gaps[0]"


def test_load_rejects_overlapping_gaps(tmp_path):
    path = _write(tmp_path, [{"id": "x", "text": "abcdef", "split": "train", "gaps": [
        {"start": 0, "end": 3, "answer": "abc"}, {"start": 2, "end": 4, "answer": "cd"}]}])
    with pytest.raises(SchemaViolation):
        load_corpus(path)


def test_load_accepts_untyped_train_gaps(tmp_path):
    path = _write(tmp_path, [{"id": "x", "text": "abc", "split": "train",
                              "gaps": [{"start": 0, "end": 1, "answer": "a"}]}])
    assert load_corpus(path)[0].gaps[0].gap_type is None


def test_load_rejects_duplicate_ids_and_bad_answers(tmp_path):
    rec = {"id": "x", "text": "abc", "split": "train", "gaps": []}
    with pytest.raises(SchemaViolation):
        load_corpus(_write(tmp_path, [rec, rec]))
    bad = {"id": "y", "text": "abc", "gaps": [{"start": 0, "end": 1, "answer": "b"}]}
    with pytest.raises(SchemaViolation):
        load_corpus(_write(tmp_path, [bad]))


FULL_CORPUS = os.environ.get("GAPFORGE_GF2")


@pytest.mark.skipif(not FULL_CORPUS, reason="set GAPFORGE_GF2 to a prepared copy of the full corpus")
def test_full_corpus_statistics():
    stats = compute_stats(load_corpus(FULL_CORPUS))
    assert stats.n_documents == {"train": 618, "dev": 50, "test": 100}
    assert stats.n_sentences == {"train": 4786, "dev": 378, "test": 707}
    assert stats.n_gaps == {"train": 4518, "dev": 365, "test": 647}
    test_counts = {"SPR": 28, "PCP": 8, "PC": 108, "IM": 46, "CPR": 92, "PR": 12, "FP": 9, "FS": 49,
                   "IP": 144, "CPA": 3, "IMP": 26, "PQ": 1}
    assert {t: stats.per_tense["test"].get(t, 0) for t in test_counts} == test_counts

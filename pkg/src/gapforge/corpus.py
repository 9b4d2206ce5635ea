"""Gap-filling exercise documents: parsing, cleaning, splitting, storage."""

from __future__ import annotations

import enum
import html
import json
import logging
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyGap, IoFailure, NestedMarkers, SchemaViolation, UnbalancedMarkers

logger = logging.getLogger(__name__)

OPEN, CLOSE = "[[", "]]"
SPLITS = ("train", "dev", "test", "unassigned")


class TenseLabel(enum.Enum):
    SPR = "Subjonctif Présent"
    PCP = "Passé Composé (participe passé)"
    PC = "Passé Composé"
    IM = "Imparfait"
    CPR = "Conditionnel Présent"
    PR = "Passé Récent"
    FP = "Futur Proche"
    FS = "Futur Simple"
    IP = "Indicatif Présent"
    CPA = "Conditionnel Passé"
    IMP = "Impératif"
    PQ = "Plus-que-parfait"

    @property
    def abbreviation(self) -> str:
        return self.name

    @property
    def full_name(self) -> str:
        return self.value

    @classmethod
    def parse(cls, label: str) -> "TenseLabel":
        """Accept either the abbreviation or the full name."""
        if label in cls.__members__:
            return cls[label]
        for member in cls:
            if member.value == label:
                return member
        raise ValueError(f"unknown tense label {label!r}")

    @classmethod
    def is_tense(cls, label: str | None) -> bool:
        if label is None:
            return False
        try:
            cls.parse(label)
        except ValueError:
            return False
        return True


TENSES: tuple[str, ...] = tuple(t.name for t in TenseLabel)


@dataclass(frozen=True)
class GapAnnotation:
    start: int
    end: int
    answer: str
    gap_type: str | None = None

    def shifted(self, delta: int) -> "GapAnnotation":
        return replace(self, start=self.start + delta, end=self.end + delta)


@dataclass(frozen=True)
class ExerciseDocument:
    id: str
    text: str
    gaps: tuple[GapAnnotation, ...] = ()
    split: str = "unassigned"

    def __post_init__(self) -> None:
        object.__setattr__(self, "gaps", tuple(self.gaps))

    def validate(self) -> "ExerciseDocument":
        """Check the gap invariants; raise SchemaViolation on the first breach."""
        if self.split not in SPLITS:
            raise SchemaViolation(f"unknown split {self.split!r}", self.id, "split")
        prev_end = -1
        for i, g in enumerate(self.gaps):
            name = f"gaps[{i}]"
            if not (0 <= g.start < g.end <= len(self.text)):
                raise SchemaViolation(
                    f"offsets ({g.start}, {g.end}) outside text of length {len(self.text)}",
                    self.id, name)
            if self.text[g.start:g.end] != g.answer:
                raise SchemaViolation(
                    f"answer {g.answer!r} != text slice {self.text[g.start:g.end]!r}", self.id, name)
            if g.start < prev_end:
                raise SchemaViolation("gaps overlap or are unsorted", self.id, name)
            prev_end = g.end
        return self


def make_gap(text: str, start: int, end: int, gap_type: str | None = None) -> GapAnnotation:
    return GapAnnotation(start, end, text[start:end], gap_type)


# -- marker text ---------------------------------------------------------------

_MARKER_RE = re.compile(r"\[\[|\]\]")


def parse_marked_text(marked: str, id: str = "doc", split: str = "unassigned",
                      gap_types: Sequence[str | None] | None = None) -> ExerciseDocument:
    """Turn ``"Je [[suis]] content."`` into a document with character-offset gaps.

    ``gap_types``, if given, is aligned with the marked regions in order.
    """
    pieces: list[str] = []
    gaps: list[tuple[int, int]] = []
    pos = 0
    out_len = 0
    open_at: int | None = None
    for m in _MARKER_RE.finditer(marked):
        chunk = marked[pos:m.start()]
        pieces.append(chunk)
        out_len += len(chunk)
        pos = m.end()
        if m.group() == OPEN:
            if open_at is not None:
                raise NestedMarkers(f"nested '[[' at position {m.start()} in {id!r}")
            open_at = out_len
        else:
            if open_at is None:
                raise UnbalancedMarkers(f"dangling ']]' at position {m.start()} in {id!r}")
            if out_len == open_at:
                raise EmptyGap(f"empty gap at position {m.start()} in {id!r}")
            gaps.append((open_at, out_len))
            open_at = None
    if open_at is not None:
        raise UnbalancedMarkers(f"dangling '[[' in {id!r}")
    pieces.append(marked[pos:])
    text = "".join(pieces)
    if gap_types is not None and len(gap_types) != len(gaps):
        raise ValueError(f"{len(gap_types)} gap types for {len(gaps)} gaps")
    types = gap_types if gap_types is not None else [None] * len(gaps)
    return ExerciseDocument(id, text, tuple(make_gap(text, s, e, t) for (s, e), t in zip(gaps, types)),
                            split)


def render_marked_text(doc: ExerciseDocument) -> str:
    return _render(doc, lambda g: OPEN + g.answer + CLOSE)


def render_student_view(doc: ExerciseDocument, blank: str = "____") -> str:
    if not blank or OPEN in blank or CLOSE in blank:
        raise ValueError("blank must be non-empty and free of gap markers")
    return _render(doc, lambda g: blank)


def _render(doc: ExerciseDocument, fill) -> str:
    out = []
    pos = 0
    for g in doc.gaps:
        out.append(doc.text[pos:g.start])
        out.append(fill(g))
        pos = g.end
    out.append(doc.text[pos:])
    return "".join(out)


# -- cleaning ------------------------------------------------------------------

_DROP_BLOCKS = re.compile(r"<(script|style)\b[^>]*>.*?</\1\s*>", re.I | re.S)
_COMMENT = re.compile(r"<!--.*?-->", re.S)
_TAG = re.compile(r"</?[A-Za-z][^<>]*?/?>")
_WS = re.compile(r"\s+")


def strip_markup(raw: str) -> str:
    """Best-effort HTML removal; gap markers survive untouched."""
    text = _DROP_BLOCKS.sub(" ", raw)
    text = _COMMENT.sub(" ", text)
    # Block-level tags must not glue adjacent words together.
    text = _TAG.sub(lambda m: " " if _is_block_tag(m.group()) else "", text)
    text = html.unescape(text)
    return _WS.sub(" ", text).strip()


_BLOCK_TAGS = {"p", "div", "br", "li", "ul", "ol", "tr", "td", "th", "table", "h1", "h2", "h3",
               "h4", "h5", "h6", "blockquote", "section", "article", "hr"}


def _is_block_tag(tag: str) -> bool:
    name = re.match(r"</?\s*([A-Za-z0-9]+)", tag)
    return bool(name) and name.group(1).lower() in _BLOCK_TAGS


# -- sentences -----------------------------------------------------------------

ABBREVIATIONS = frozenset({
    "m", "mm", "mme", "mmes", "mlle", "mlles", "dr", "pr", "me", "mgr", "st", "ste",
    "cf", "ex", "p", "pp", "vol", "av", "bd", "chap", "fig", "env", "éd", "réf", "tél",
})

# French typography puts a space before closing guillemets: "« Oui. » Puis".
_BOUNDARY = re.compile(r"[.?!…]+(?:\s*[\"»”’')\]])*(\s+)(?=[A-ZÀ-ÖØ-Þ\"«“‘'0-9])")
_PREV_WORD = re.compile(r"(\w+)\.$")


def sentence_spans(text: str, gaps: Sequence[GapAnnotation] = ()) -> list[tuple[int, int]]:
    """Character intervals of the sentences in ``text``, whitespace-trimmed.

    A boundary that would cut through a gap is ignored, merging the two sides.
    """
    cuts: list[tuple[int, int]] = []  # (end of sentence, start of next)
    for m in _BOUNDARY.finditer(text):
        end, nxt = m.start(1), m.end(1)
        prev = _PREV_WORD.search(text, 0, m.start() + 1)
        if prev and m.group().startswith(".") and not m.group().startswith("..") \
                and prev.group(1).lower() in ABBREVIATIONS:
            continue
        if any(g.start < nxt and g.end > end for g in gaps):
            continue
        cuts.append((end, nxt))
    spans = []
    start = 0
    for end, nxt in cuts:
        spans.append((start, end))
        start = nxt
    spans.append((start, len(text)))
    out = []
    for s, e in spans:
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if e > s:
            out.append((s, e))
    return out


def sub_document(doc: ExerciseDocument, start: int, end: int, id: str) -> ExerciseDocument:
    """Slice ``doc.text[start:end]`` keeping the gaps that fall inside, re-offset."""
    gaps = tuple(g.shifted(-start) for g in doc.gaps if g.start >= start and g.end <= end)
    return ExerciseDocument(id, doc.text[start:end], gaps, doc.split)


def sentence_split(doc: ExerciseDocument) -> list[ExerciseDocument]:
    spans = sentence_spans(doc.text, doc.gaps)
    if len(spans) == 1 and spans[0] == (0, len(doc.text)):
        return [doc]
    return [sub_document(doc, s, e, f"{doc.id}/{i}") for i, (s, e) in enumerate(spans)]


def join_sentences(sentences: Iterable[ExerciseDocument], id: str, sep: str = " ") -> ExerciseDocument:
    """Concatenate sentence documents with ``sep``, shifting their gaps."""
    texts, gaps = [], []
    pos = 0
    split = "unassigned"
    for k, s in enumerate(sentences):
        if k:
            texts.append(sep)
            pos += len(sep)
        texts.append(s.text)
        gaps.extend(g.shifted(pos) for g in s.gaps)
        pos += len(s.text)
        split = s.split
    return ExerciseDocument(id, "".join(texts), tuple(gaps), split)


# -- statistics ----------------------------------------------------------------

@dataclass
class CorpusStats:
    n_documents: dict[str, int] = field(default_factory=dict)
    n_sentences: dict[str, int] = field(default_factory=dict)
    n_gaps: dict[str, int] = field(default_factory=dict)
    per_tense: dict[str, dict[str, int]] = field(default_factory=dict)

    def format_table(self, splits: Sequence[str] = ("train", "dev", "test")) -> str:
        rows = [("", *[s.capitalize() for s in splits]),
                ("# Documents", *[str(self.n_documents.get(s, 0)) for s in splits]),
                ("# Sentences", *[str(self.n_sentences.get(s, 0)) for s in splits]),
                ("# Gaps", *[str(self.n_gaps.get(s, 0)) for s in splits])]
        for t in TenseLabel:
            cells = []
            for s in splits:
                cells.append(str(self.per_tense[s].get(t.name, 0)) if s in self.per_tense else "UNK")
            rows.append((f"{t.full_name} ({t.name})", *cells))
        width = max(len(r[0]) for r in rows)
        lines = []
        for i, r in enumerate(rows):
            lines.append(r[0].ljust(width) + "".join(c.rjust(8) for c in r[1:]))
            if i in (0, 3):
                lines.append("-" * (width + 8 * len(splits)))
        return "\n".join(lines)


def compute_stats(corpus: Iterable[ExerciseDocument]) -> CorpusStats:
    stats = CorpusStats()
    tense_counts: dict[str, Counter] = {}
    for doc in corpus:
        s = doc.split
        stats.n_documents[s] = stats.n_documents.get(s, 0) + 1
        stats.n_sentences[s] = stats.n_sentences.get(s, 0) + len(sentence_spans(doc.text, doc.gaps))
        stats.n_gaps[s] = stats.n_gaps.get(s, 0) + len(doc.gaps)
        if s in ("dev", "test"):
            c = tense_counts.setdefault(s, Counter())
            for g in doc.gaps:
                if TenseLabel.is_tense(g.gap_type):
                    c[TenseLabel.parse(g.gap_type).name] += 1
    stats.per_tense = {s: {t: c.get(t, 0) for t in TENSES} for s, c in tense_counts.items()}
    return stats


# -- JSONL storage -------------------------------------------------------------

def document_to_record(doc: ExerciseDocument) -> dict:
    return {
        "id": doc.id,
        "text": doc.text,
        "split": doc.split,
        "gaps": [{"start": g.start, "end": g.end, "answer": g.answer, "gap_type": g.gap_type}
                 for g in doc.gaps],
    }


def document_from_record(rec: dict) -> ExerciseDocument:
    doc_id = rec.get("id") if isinstance(rec, dict) else None
    if not isinstance(rec, dict):
        raise SchemaViolation("record is not an object")
    for key, typ in (("id", str), ("text", str)):
        if not isinstance(rec.get(key), typ):
            raise SchemaViolation(f"missing or non-{typ.__name__} field", doc_id, key)
    split = rec.get("split") or "unassigned"
    raw_gaps = rec.get("gaps", [])
    if not isinstance(raw_gaps, list):
        raise SchemaViolation("gaps must be a list", doc_id, "gaps")
    gaps = []
    for i, g in enumerate(raw_gaps):
        if not isinstance(g, dict):
            raise SchemaViolation("gap is not an object", doc_id, f"gaps[{i}]")
        for key in ("start", "end"):
            if not isinstance(g.get(key), int) or isinstance(g.get(key), bool):
                raise SchemaViolation("offset must be an integer", doc_id, f"gaps[{i}].{key}")
        if not isinstance(g.get("answer"), str):
            raise SchemaViolation("answer must be a string", doc_id, f"gaps[{i}].answer")
        gap_type = g.get("gap_type")
        if gap_type is not None and not isinstance(gap_type, str):
            raise SchemaViolation("gap_type must be a string or null", doc_id, f"gaps[{i}].gap_type")
        gaps.append(GapAnnotation(g["start"], g["end"], g["answer"], gap_type))
    return ExerciseDocument(rec["id"], rec["text"], tuple(gaps), split).validate()


def load_corpus(path: str | os.PathLike) -> list[ExerciseDocument]:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    docs = []
    seen = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        doc = document_from_record(rec)
        if doc.id in seen:
            raise SchemaViolation("duplicate document id", doc.id, "id")
        seen.add(doc.id)
        docs.append(doc)
    return docs


def save_corpus(corpus: Iterable[ExerciseDocument], path: str | os.PathLike) -> None:
    payload = "".join(json.dumps(document_to_record(d), ensure_ascii=False) + "\n" for d in corpus)
    atomic_write_text(path, payload)


def atomic_write_text(path: str | os.PathLike, payload: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def by_split(corpus: Iterable[ExerciseDocument], *splits: str) -> list[ExerciseDocument]:
    return [d for d in corpus if d.split in splits]

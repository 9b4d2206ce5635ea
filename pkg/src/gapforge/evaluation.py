"""Binary gap prediction and gap-type disentangling protocols."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import (TENSES, ExerciseDocument, TenseLabel, join_sentences, parse_marked_text,
                     render_marked_text, sentence_split)
from .errors import MissingTense, SingleSentence
from .spans import Span, TokenizedText, project_gaps

logger = logging.getLogger(__name__)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class TypeScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def as_dict(self) -> dict:
        p, r, f = prf(self.tp, self.fp, self.fn)
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": p, "recall": r, "f1": f,
                "support": self.support}


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_type: dict[str, TypeScore] | None = None
    n_instances: int = 0
    skipped: dict = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return prf(self.tp, self.fp, self.fn)[2]

    @property
    def macro_f1(self) -> float | None:
        if self.per_type is None:
            return None
        scores = [prf(s.tp, s.fp, s.fn)[2] for s in self.per_type.values()]
        return sum(scores) / len(scores) if scores else 0.0

    def to_dict(self) -> dict:
        out = {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
               "recall": self.recall, "f1": self.f1, "n_instances": self.n_instances,
               "skipped": self.skipped}
        if self.per_type is not None:
            out["per_type"] = {t: s.as_dict() for t, s in self.per_type.items()}
            out["macro_f1"] = self.macro_f1
        return out

    def format_table(self) -> str:
        lines = [f"overall  P {100 * self.precision:6.2f}  R {100 * self.recall:6.2f}  "
                 f"F1 {100 * self.f1:6.2f}  (tp={self.tp} fp={self.fp} fn={self.fn})"]
        if self.per_type is not None:
            lines.append(f"{'type':<8}{'P':>8}{'R':>8}{'F1':>8}{'support':>9}")
            for t, s in self.per_type.items():
                d = s.as_dict()
                lines.append(f"{t:<8}{100 * d['precision']:8.1f}{100 * d['recall']:8.1f}"
                             f"{100 * d['f1']:8.1f}{d['support']:9d}")
            lines.append(f"{'macro F1':<8}{100 * self.macro_f1:24.1f}")
        return "\n".join(lines)


@dataclass(frozen=True)
class TenseExemplar:
    tense: str
    marked_text: str
    source_id: str = ""

    def __post_init__(self) -> None:
        doc = parse_marked_text(self.marked_text, self.source_id or "exemplar")
        if not doc.gaps:
            raise ValueError(f"exemplar for {self.tense} has no gaps")


def normalize_type(label: str | None) -> str | None:
    if label is None:
        return None
    return TenseLabel.parse(label).name if TenseLabel.is_tense(label) else label


# -- halves ----------------------------------------------------------------------

def _halves(doc: ExerciseDocument) -> tuple[list[ExerciseDocument], list[ExerciseDocument]]:
    sents = sentence_split(doc)
    if len(sents) < 2:
        raise SingleSentence(f"document {doc.id!r} has a single sentence")
    cut = math.ceil(len(sents) / 2)
    return sents[:cut], sents[cut:]


def halve_document(doc: ExerciseDocument) -> tuple[ExerciseDocument, ExerciseDocument]:
    """First ceil(n/2) sentences and the rest, as documents with local offsets."""
    a, b = _halves(doc)
    return join_sentences(a, f"{doc.id}#a"), join_sentences(b, f"{doc.id}#b")


# -- scoring one sentence ------------------------------------------------------

def _prepare(model, sent: ExerciseDocument) -> tuple[TokenizedText, list]:
    """Tokenize an input sentence, truncating to the encoder limit.

    Gaps that fall past the truncation point are returned for counting as
    misses.
    """
    tok = model.tokenize(sent.text)
    lost = []
    if tok.n_tokens > model.max_tokens:
        tok = tok.truncated(model.max_tokens)
        limit = tok.offsets[-1][1] if tok.n_tokens else 0
        lost = [g for g in sent.gaps if g.end > limit]
    return tok, lost


def _count(pred: Iterable[Span], gold: set[Span], n_lost: int) -> tuple[int, int, int]:
    pred = set(pred)
    tp = len(pred & gold)
    return tp, len(pred) - tp, len(gold) - tp + n_lost


def _dump_spans(tok: TokenizedText, spans: dict[Span, float]) -> list[dict]:
    out = []
    for sp in sorted(spans):
        s, e = tok.char_span(sp)
        out.append({"start": sp.start, "end": sp.end, "start_char": s, "end_char": e,
                    "text": tok.text[s:e], "probability": spans[sp]})
    return out


# -- binary protocol -------------------------------------------------------------

@torch.no_grad()
def _binary_document(model, doc: ExerciseDocument, threshold: float):
    a, b = _halves(doc)
    counts = [0, 0, 0]
    dumps = []
    for direction, ex_half, in_half in (("a->b", a, b), ("b->a", b, a)):
        exemplar = model.encode_exemplars([render_marked_text(join_sentences(ex_half, "ex"))])
        for idx, sent in enumerate(in_half):
            tok, lost = _prepare(model, sent)
            kept = [g for g in sent.gaps if g not in lost]
            overflow: list = []
            gold = project_gaps(tok, kept, model.max_width, overflow)
            spans, probs = model.span_probabilities(tok, exemplar)
            pred = {sp: float(p) for sp, p in zip(spans, probs[0]) if p >= threshold}
            for i, c in enumerate(_count(pred, gold, len(lost) + len(overflow))):
                counts[i] += c
            dumps.append({"id": doc.id, "direction": direction, "sentence": idx,
                          "spans": _dump_spans(tok, pred)})
    return counts, dumps


def binary_eval(model, test_corpus: Sequence[ExerciseDocument], threshold: float | None = None,
                workers: int = 1, dump: list | None = None) -> EvalReport:
    """Half-split protocol: each half in turn serves as exemplar for the other.

    Input halves are scored one sentence at a time. Single-sentence
    documents are skipped and reported in ``report.skipped``.
    """
    threshold = model.threshold if threshold is None else threshold
    eligible, skipped = [], []
    for doc in test_corpus:
        (eligible if len(sentence_split(doc)) >= 2 else skipped).append(doc)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda d: _binary_document(model, d, threshold), eligible))
    report = EvalReport(n_instances=2 * len(eligible))
    for (tp, fp, fn), dumps in results:
        report.tp += tp
        report.fp += fp
        report.fn += fn
        if dump is not None:
            dump.extend(dumps)
    n_docs = len(eligible) + len(skipped)
    n_gaps = sum(len(d.gaps) for d in test_corpus)
    skipped_gaps = sum(len(d.gaps) for d in skipped)
    report.skipped = {
        "documents": len(skipped), "gaps": skipped_gaps, "ids": [d.id for d in skipped],
        "document_fraction": len(skipped) / n_docs if n_docs else 0.0,
        "gap_fraction": skipped_gaps / n_gaps if n_gaps else 0.0,
    }
    return report


# -- disentangling protocol ------------------------------------------------------

def build_tense_exemplars(source_corpus: Sequence[ExerciseDocument], labels: Sequence[str] = TENSES,
                          seed: int = 0, allow_missing: bool = False
                          ) -> tuple[list[TenseExemplar], set[str]]:
    """One homogeneous exemplar per label, drawn at random from ``source_corpus``.

    A document qualifies for label T when it has at least one gap and every
    gap is typed T. Returns the exemplars and the ids of the documents used,
    which callers must drop from every split (see ``remove_documents``).
    """
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[ExerciseDocument]] = {t: [] for t in labels}
    for doc in source_corpus:
        types = {normalize_type(g.gap_type) for g in doc.gaps}
        if len(types) == 1:
            (t,) = types
            if t in by_label:
                by_label[t].append(doc)
    exemplars, removed = [], set()
    for t in labels:
        pool = sorted(by_label[t], key=lambda d: d.id)
        if not pool:
            if allow_missing:
                logger.warning("no homogeneous document for %s; it gets no exemplar", t)
                continue
            raise MissingTense(f"no homogeneous document annotated with {t}")
        doc = pool[int(rng.integers(len(pool)))]
        exemplars.append(TenseExemplar(t, render_marked_text(doc), doc.id))
        removed.add(doc.id)
    return exemplars, removed


def remove_documents(corpus: Iterable[ExerciseDocument], ids: Iterable[str]) -> list[ExerciseDocument]:
    ids = set(ids)
    return [d for d in corpus if d.id not in ids]


@torch.no_grad()
def _disentangle_document(model, doc, labels, ex_labels, ex_vectors, threshold):
    counts = {t: [0, 0, 0] for t in labels}
    dumps = []
    for idx, sent in enumerate(sentence_split(doc)):
        tok, lost = _prepare(model, sent)
        spans, probs = model.span_probabilities(tok, ex_vectors)
        for t in labels:
            typed = [g for g in sent.gaps if normalize_type(g.gap_type) == t]
            kept = [g for g in typed if g not in lost]
            overflow: list = []
            gold = project_gaps(tok, kept, model.max_width, overflow)
            missed = len(typed) - len(kept) + len(overflow)
            if t in ex_labels:
                row = probs[ex_labels.index(t)]
                pred = {sp: float(p) for sp, p in zip(spans, row) if p >= threshold}
            else:
                pred = {}
            c = _count(pred, gold, missed)
            for i in range(3):
                counts[t][i] += c[i]
            if pred:
                dumps.append({"id": doc.id, "tense": t, "sentence": idx, "spans": _dump_spans(tok, pred)})
    return counts, dumps


def disentangle_eval(model, test_corpus: Sequence[ExerciseDocument], exemplars: Sequence[TenseExemplar],
                     labels: Sequence[str] = TENSES, threshold: float | None = None, workers: int = 1,
                     dump: list | None = None) -> EvalReport:
    """Prompt every test sentence with each fixed exemplar and score per type.

    For type T, hits are predictions equal to a gold gap of type T; every
    other prediction (including gaps of other types) is a false positive.
    Macro F1 averages over all ``labels``, zero-support ones included.
    """
    threshold = model.threshold if threshold is None else threshold
    labels = [normalize_type(t) for t in labels]
    exemplars = [e for e in exemplars if normalize_type(e.tense) in labels]
    ex_labels = [normalize_type(e.tense) for e in exemplars]
    with torch.no_grad():
        ex_vectors = model.encode_exemplars([e.marked_text for e in exemplars]) if exemplars else None
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(
            lambda d: _disentangle_document(model, d, labels, ex_labels, ex_vectors, threshold), test_corpus))
    per_type = {t: TypeScore() for t in labels}
    for counts, dumps in results:
        for t, (tp, fp, fn) in counts.items():
            per_type[t].tp += tp
            per_type[t].fp += fp
            per_type[t].fn += fn
        if dump is not None:
            dump.extend(dumps)
    report = EvalReport(per_type=per_type, n_instances=len(exemplars) * sum(len(sentence_split(d)) for d in test_corpus))
    report.tp = sum(s.tp for s in per_type.values())
    report.fp = sum(s.fp for s in per_type.values())
    report.fn = sum(s.fn for s in per_type.values())
    return report


def save_exemplars(exemplars: Sequence[TenseExemplar], path) -> None:
    from .corpus import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(asdict(e), ensure_ascii=False) + "\n" for e in exemplars))


def load_exemplars(path) -> list[TenseExemplar]:
    with open(path, encoding="utf-8") as fh:
        return [TenseExemplar(**json.loads(line)) for line in fh if line.strip()]

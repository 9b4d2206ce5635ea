"""Toy corpora with two disjoint pseudo-word gap classes.

Every sentence mixes filler words with pseudo-words of class A and B. A
document gaps exactly one class, so which tokens are gaps can only be
told from an exemplar of the same document. That is the situation in
which exemplar conditioning should beat a static gap detector.
"""

from __future__ import annotations

import numpy as np

from .corpus import ExerciseDocument, GapAnnotation

CLASS_WORDS = {
    "A": ("zabu", "zelki", "zimor", "zofa", "zunet", "zadri", "zerpo", "zilva"),
    "B": ("korva", "kupi", "kelmo", "kitra", "konsu", "kabel", "kerdi", "kuvra"),
}
FILLER = ("le", "la", "un", "une", "chat", "maison", "jardin", "pain", "soir", "matin",
          "ami", "livre", "table", "rue", "ville", "avec", "dans", "pour", "sur", "très",
          "petit", "grand", "beau", "vieux", "souvent", "hier", "demain", "ici", "encore", "bien")


def _sentence(rng: np.random.Generator, classes: tuple[str, ...]) -> list[tuple[str, str | None]]:
    words: list[tuple[str, str | None]] = [(str(w), None) for w in
                                           rng.choice(FILLER, size=int(rng.integers(4, 8)))]
    for cls in classes:
        for _ in range(int(rng.integers(1, 3))):
            pos = int(rng.integers(1, len(words) + 1))
            words.insert(pos, (str(rng.choice(CLASS_WORDS[cls])), cls))
    return words


def _document(doc_id: str, sentences, gapped: set[str], split: str) -> ExerciseDocument:
    parts, gaps = [], []
    pos = 0
    for k, words in enumerate(sentences):
        if k:
            parts.append(" ")
            pos += 1
        for j, (w, cls) in enumerate(words):
            if j == 0:
                w = w.capitalize()
            else:
                parts.append(" ")
                pos += 1
            if cls in gapped:
                gaps.append(GapAnnotation(pos, pos + len(w), w, cls))
            parts.append(w)
            pos += len(w)
        parts.append(".")
        pos += 1
    return ExerciseDocument(doc_id, "".join(parts), tuple(gaps), split).validate()


def make_corpus(n_docs: int = 200, seed: int = 0, sentences: tuple[int, int] = (3, 6),
                mixed: bool = True, split: str = "unassigned", prefix: str = "syn"
                ) -> tuple[list[ExerciseDocument], list[ExerciseDocument]]:
    """Generate ``n_docs`` documents, half gapping class A and half class B.

    Returns two views of the same texts: the single-class exercises and a
    fully annotated copy in which every pseudo-word is a typed gap. With
    ``mixed=False`` each sentence only contains words of its document's
    gapped class.
    """
    rng = np.random.default_rng(seed)
    exercises, annotated = [], []
    for i in range(n_docs):
        cls = "AB"[i % 2]
        classes = ("A", "B") if mixed else (cls,)
        sents = [_sentence(rng, classes) for _ in range(int(rng.integers(sentences[0], sentences[1] + 1)))]
        doc_id = f"{prefix}-{i:04d}"
        exercises.append(_document(doc_id, sents, {cls}, split))
        annotated.append(_document(doc_id, sents, {"A", "B"}, split))
    return exercises, annotated


def gap_class(doc: ExerciseDocument) -> str | None:
    types = {g.gap_type for g in doc.gaps}
    return types.pop() if len(types) == 1 else None

"""Exemplar-conditioned gap detection for gap-filling grammar exercises."""

__version__ = "0.1.0"

from .corpus import (CorpusStats, ExerciseDocument, GapAnnotation, TenseLabel, compute_stats,
                     load_corpus, parse_marked_text, render_marked_text, render_student_view,
                     save_corpus, sentence_split, strip_markup)
from .evaluation import EvalReport, TenseExemplar, binary_eval, disentangle_eval, prf
from .model import GapModel, SpanScorer
from .spans import Span, TokenizedText, enumerate_spans, label_spans, project_gaps
from .training import TrainConfig, train

__all__ = [
    "CorpusStats", "EvalReport", "ExerciseDocument", "GapAnnotation", "GapModel", "Span", "SpanScorer",
    "TenseExemplar", "TenseLabel", "TokenizedText", "TrainConfig", "binary_eval", "compute_stats",
    "disentangle_eval", "enumerate_spans", "label_spans", "load_corpus", "parse_marked_text", "prf",
    "project_gaps", "render_marked_text", "render_student_view", "save_corpus", "sentence_split",
    "strip_markup", "train",
]

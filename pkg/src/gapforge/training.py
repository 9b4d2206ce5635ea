"""Training pairs from partially annotated exercises and the optimisation loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .corpus import ExerciseDocument, render_marked_text, sentence_split
from .encoder import EncoderConfig, PretrainedAdapter, TinyEncoder, WordTokenizer
from .errors import EmptyCorpus, NoAnnotatedDev, NonFiniteLoss, SameDocument, TooFewSentences
from .model import GapModel, SpanScorer, WIDTH_DIM, bce_loss
from .spans import TokenizedText, enumerate_spans, label_spans, project_gaps

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 16
    epochs: int = 30
    max_span_width: int = 12
    m: int = 3
    neg_ratio: float = 1.0
    neg_ratio_candidates: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    seed: int = 0
    model_kind: str = "example_aware"
    encoder: str = "tiny"  # "tiny" or a Hugging Face checkpoint name
    k: int = 32
    max_len: int = 128
    piece_len: int | None = None
    width_dim: int = WIDTH_DIM
    threshold: float = 0.5

    def __post_init__(self) -> None:
        self.neg_ratio_candidates = tuple(float(r) for r in self.neg_ratio_candidates)
        positive = (self.learning_rate, self.batch_size, self.epochs, self.max_span_width, self.m)
        if any(v <= 0 for v in positive):
            raise ValueError("learning_rate, batch_size, epochs, max_span_width and m must be positive")
        if self.neg_ratio < 0 or any(r < 0 for r in self.neg_ratio_candidates):
            raise ValueError("negative ratios must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neg_ratio_candidates"] = list(self.neg_ratio_candidates)
        return d


@dataclass
class TrainingPair:
    input: ExerciseDocument
    tokens: TokenizedText
    labels: np.ndarray
    exemplar: str
    negative: bool
    source_id: str = ""
    exemplar_ids: tuple[str, ...] = field(default_factory=tuple)


class PairFactory:
    """Builds (exemplar, input) pairs, caching sentence splits and tokenization."""

    def __init__(self, tokenize: Callable[[str], TokenizedText], m: int = 3, max_width: int = 12):
        self.tokenize = tokenize
        self.m = m
        self.max_width = max_width
        self._sentences: dict[str, list[ExerciseDocument]] = {}
        self._marked: dict[str, list[str]] = {}
        self._tokens: dict[str, TokenizedText] = {}

    def sentences(self, doc: ExerciseDocument) -> list[ExerciseDocument]:
        if doc.id not in self._sentences:
            sents = sentence_split(doc)
            self._sentences[doc.id] = sents
            self._marked[doc.id] = [render_marked_text(s) for s in sents]
        return self._sentences[doc.id]

    def _input(self, sent: ExerciseDocument, negative: bool) -> tuple[TokenizedText, np.ndarray]:
        tok = self._tokens.get(sent.id)
        if tok is None:
            tok = self._tokens[sent.id] = self.tokenize(sent.text)
        candidates = enumerate_spans(tok.n_tokens, self.max_width)
        if negative:
            return tok, np.zeros(len(candidates), dtype=np.float32)
        return tok, label_spans(candidates, project_gaps(tok, sent.gaps, self.max_width))

    def _exemplar(self, doc: ExerciseDocument, exclude: int | None, rng: np.random.Generator
                  ) -> tuple[str, tuple[str, ...]]:
        sents = self.sentences(doc)
        pool = [i for i in range(len(sents)) if i != exclude]
        j = int(rng.integers(1, min(self.m, len(pool)) + 1))
        chosen = sorted(rng.choice(pool, size=j, replace=False).tolist())
        marked = self._marked[doc.id]
        return " ".join(marked[i] for i in chosen), tuple(sents[i].id for i in chosen)

    def positive(self, doc: ExerciseDocument, rng: np.random.Generator, index: int | None = None
                 ) -> TrainingPair:
        sents = self.sentences(doc)
        if len(sents) < 2:
            raise TooFewSentences(f"document {doc.id!r} has {len(sents)} sentence(s)")
        if index is None:
            index = int(rng.integers(len(sents)))
        exemplar, ids = self._exemplar(doc, index, rng)
        tok, labels = self._input(sents[index], negative=False)
        return TrainingPair(sents[index], tok, labels, exemplar, False, doc.id, ids)

    def negative(self, input_doc: ExerciseDocument, exemplar_doc: ExerciseDocument,
                 rng: np.random.Generator) -> TrainingPair:
        if input_doc.id == exemplar_doc.id:
            raise SameDocument(f"negative pair needs two documents, got {input_doc.id!r} twice")
        sents = self.sentences(input_doc)
        sent = sents[int(rng.integers(len(sents)))]
        exemplar, ids = self._exemplar(exemplar_doc, None, rng)
        tok, labels = self._input(sent, negative=True)
        return TrainingPair(sent, tok, labels, exemplar, True, input_doc.id, ids)

    def epoch(self, corpus: Sequence[ExerciseDocument], neg_ratio: float,
              rng: np.random.Generator) -> list[TrainingPair]:
        docs = [d for d in corpus if d.text.strip()]
        if not docs:
            raise EmptyCorpus("no documents to build training pairs from")
        doc_rngs = rng.spawn(len(docs))
        pairs = []
        for doc, drng in zip(docs, doc_rngs):
            n = len(self.sentences(doc))
            if n >= 2:
                pairs.extend(self.positive(doc, drng, i) for i in range(n))
        n_neg = math.floor(neg_ratio * len(pairs))
        if n_neg and len(docs) < 2:
            raise EmptyCorpus("negative pairs need at least two documents")
        for _ in range(n_neg):
            a, b = rng.choice(len(docs), size=2, replace=False)
            pairs.append(self.negative(docs[a], docs[b], rng))
        order = rng.permutation(len(pairs))
        return [pairs[i] for i in order]


def make_positive_pair(doc, rng, tokenize, m=3, max_width=12) -> TrainingPair:
    return PairFactory(tokenize, m, max_width).positive(doc, rng)


def make_negative_pair(input_doc, exemplar_doc, rng, tokenize, m=3, max_width=12) -> TrainingPair:
    return PairFactory(tokenize, m, max_width).negative(input_doc, exemplar_doc, rng)


def build_epoch(corpus, neg_ratio, rng, tokenize, m=3, max_width=12) -> list[TrainingPair]:
    return PairFactory(tokenize, m, max_width).epoch(corpus, neg_ratio, rng)


# -- model construction --------------------------------------------------------

def build_encoder(config: TrainConfig, corpus: Iterable[ExerciseDocument] = ()):
    """Fresh encoder for ``config``; the tiny encoder takes its vocabulary from ``corpus``."""
    if config.encoder == "tiny":
        vocab = WordTokenizer.build_vocab((d.text for d in corpus), config.piece_len)
        return TinyEncoder(EncoderConfig(k=config.k, max_len=config.max_len, vocab=vocab,
                                         seed=config.seed, piece_len=config.piece_len))
    return PretrainedAdapter.from_pretrained(config.encoder)


def build_model(config: TrainConfig, encoder, model_kind: str | None = None) -> GapModel:
    dtype = next(encoder.parameters()).dtype
    scorer = SpanScorer(encoder.k, config.width_dim, config.max_span_width, seed=config.seed + 1,
                        dtype=dtype)
    return GapModel(encoder, scorer, model_kind or config.model_kind, config.threshold)


# -- optimisation --------------------------------------------------------------

def batch_loss(model: GapModel, pairs: Sequence[TrainingPair]) -> torch.Tensor:
    exemplars = model.encode_exemplars([p.exemplar for p in pairs]) if model.uses_exemplar else None
    logits, _ = model.batch_logits([p.tokens for p in pairs], exemplars)
    labels = torch.from_numpy(np.concatenate([p.labels for p in pairs])).to(logits.dtype)
    return bce_loss(torch.sigmoid(logits), labels)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(corpus: Sequence[ExerciseDocument], config: TrainConfig, encoder=None,
          model_kind: str | None = None, log_path: str | os.PathLike | None = None,
          dev_eval: Callable[[GapModel], dict] | None = None) -> GapModel:
    """Train a gap model; returns the final-epoch model (no early stopping).

    Pairs are rebuilt every epoch from a generator seeded by (seed, epoch).
    ``dev_eval``, when given, is called after each epoch and its result is
    written to the run log.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    if encoder is None:
        encoder = build_encoder(config, corpus)
    model = build_model(config, encoder, model_kind)
    factory = PairFactory(model.tokenize, config.m, config.max_span_width)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    probe = factory.epoch(corpus, config.neg_ratio, np.random.default_rng([config.seed, 10**6]))
    probe = probe[:config.batch_size]

    def probe_loss() -> float:
        model.eval()
        with torch.no_grad():
            value = float(batch_loss(model, probe)) if probe else float("nan")
        model.train()
        return value

    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        initial = probe_loss()
        _log(log, {"epoch": 0, "probe_loss": initial})
        model.train()
        for epoch in range(1, config.epochs + 1):
            pairs = factory.epoch(corpus, config.neg_ratio, _epoch_rng(config.seed, epoch))
            total, batches = 0.0, 0
            for i in range(0, len(pairs), config.batch_size):
                loss = batch_loss(model, pairs[i:i + config.batch_size])
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"loss became {loss.item()} at epoch {epoch}, batch {i // config.batch_size}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
                batches += 1
            record = {"epoch": epoch, "train_loss": total / max(batches, 1), "probe_loss": probe_loss(),
                      "n_pairs": len(pairs), "n_negative": sum(p.negative for p in pairs)}
            if dev_eval is not None:
                model.eval()
                record["dev"] = dev_eval(model)
                model.train()
            logger.info("epoch %d: train loss %.4f, probe loss %.4f", epoch, record["train_loss"],
                        record["probe_loss"])
            _log(log, record)
    finally:
        if log:
            log.close()
    model.eval()
    model.initial_probe_loss = initial
    return model


def _log(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def tune_negative_ratio(train_split: Sequence[ExerciseDocument], dev_split: Sequence[ExerciseDocument],
                        config: TrainConfig, encoder=None, exemplars=None,
                        labels: Sequence[str] | None = None, model_kind: str | None = None,
                        ) -> tuple[float, dict[float, float]]:
    """Pick the negative:positive ratio with the best dev macro F1 (ties: smaller ratio).

    ``exemplars`` are the fixed per-type exemplars used for the disentangling
    evaluation; when omitted they are drawn from ``dev_split`` itself and the
    chosen documents are removed from it.
    """
    from .evaluation import build_tense_exemplars, disentangle_eval, remove_documents
    from .corpus import TENSES

    labels = tuple(labels or TENSES)
    dev_split = list(dev_split)
    if not any(g.gap_type for d in dev_split for g in d.gaps):
        raise NoAnnotatedDev("dev split carries no gap_type annotations")
    candidates = sorted(set(config.neg_ratio_candidates))
    if len(candidates) == 1:
        return candidates[0], {}
    if exemplars is None:
        exemplars, removed = build_tense_exemplars(dev_split, labels, seed=config.seed, allow_missing=True)
        dev_split = remove_documents(dev_split, removed)
    if encoder is None:
        encoder = build_encoder(config, list(train_split) + list(dev_split))
    scores: dict[float, float] = {}
    for ratio in candidates:
        cfg = copy.copy(config)
        cfg.neg_ratio = ratio
        model = train(train_split, cfg, copy.deepcopy(encoder), model_kind)
        report = disentangle_eval(model, dev_split, exemplars, labels)
        scores[ratio] = report.macro_f1
        logger.info("neg_ratio %.3g: dev macro F1 %.4f", ratio, report.macro_f1)
    best = max(candidates, key=lambda r: (scores[r], -r))
    return best, scores


def final_train(train_split, dev_split, best_ratio: float, config: TrainConfig, encoder=None,
                model_kind: str | None = None, log_path=None) -> GapModel:
    cfg = copy.copy(config)
    cfg.neg_ratio = best_ratio
    return train(list(train_split) + list(dev_split), cfg, encoder, model_kind, log_path)

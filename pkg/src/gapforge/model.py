"""Span scorers: baseline and exemplar-conditioned gap probabilities."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import CLOSE, OPEN, parse_marked_text, render_marked_text, sentence_split
from .encoder import EncodedSequence, load_encoder, load_state, save_state
from .errors import CheckpointMismatch, DimensionMismatch, LengthMismatch, SpanOutOfBounds
from .spans import DEFAULT_MAX_WIDTH, Span, TokenizedText, span_arrays

MODEL_KINDS = ("baseline", "example_aware")
WIDTH_DIM = 20
EPS = 1e-7


class SpanScorer(nn.Module):
    """FFNN over [h_start; h_end; width embedding] plus the linear gap head."""

    def __init__(self, k: int, d_w: int = WIDTH_DIM, max_width: int = DEFAULT_MAX_WIDTH,
                 hidden: int | None = None, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.k, self.d_w, self.max_width = k, d_w, max_width
        hidden = hidden or k
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.ffnn = nn.Sequential(nn.Linear(2 * k + d_w, hidden), nn.ReLU(), nn.Linear(hidden, k))
            self.width_embeddings = nn.Embedding(max_width, d_w)
            bound = 1.0 / k ** 0.5
            self.w = nn.Parameter(torch.empty(k).uniform_(-bound, bound))
            self.b = nn.Parameter(torch.zeros(()))
        self.to(dtype)

    @property
    def hidden(self) -> int:
        return self.ffnn[0].out_features

    def represent(self, starts: torch.Tensor, ends: torch.Tensor, widths: torch.Tensor) -> torch.Tensor:
        """Span vectors from gathered endpoint vectors ``starts``/``ends`` ([S, k]) and ``widths`` ([S])."""
        return self.ffnn(torch.cat([starts, ends, self.width_embeddings(widths - 1)], dim=-1))

    def logits(self, h_span: torch.Tensor, h_exemplar: torch.Tensor | None = None) -> torch.Tensor:
        z = h_span @ self.w
        if h_exemplar is not None:
            z = z + (h_span * h_exemplar).sum(-1)
        return z + self.b


def span_representation(enc: EncodedSequence, span: Span, params: SpanScorer) -> torch.Tensor:
    n = enc.token_vectors.shape[0]
    if not (0 <= span.start <= span.end < n):
        raise SpanOutOfBounds(f"span {tuple(span)} outside sequence of {n} tokens")
    if span.width > params.max_width:
        raise SpanOutOfBounds(f"span width {span.width} exceeds max_width={params.max_width}")
    h = enc.token_vectors
    return params.represent(h[span.start], h[span.end], torch.tensor(span.width))


def score_baseline(h_span: torch.Tensor, params: SpanScorer) -> torch.Tensor:
    return torch.sigmoid(params.logits(torch.as_tensor(h_span, dtype=params.w.dtype)))


def score_example_aware(h_span: torch.Tensor, h_exemplar: torch.Tensor, params: SpanScorer) -> torch.Tensor:
    h_span = torch.as_tensor(h_span, dtype=params.w.dtype)
    h_exemplar = torch.as_tensor(h_exemplar, dtype=params.w.dtype)
    if h_span.shape[-1] != params.k or h_exemplar.shape[-1] != params.k:
        raise DimensionMismatch(
            f"expected dimension {params.k}, got {h_span.shape[-1]} and {h_exemplar.shape[-1]}")
    return torch.sigmoid(params.logits(h_span, h_exemplar))


def bce_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    probabilities = torch.as_tensor(probabilities)
    labels = torch.as_tensor(labels, dtype=probabilities.dtype)
    if probabilities.shape != labels.shape:
        raise LengthMismatch(f"{tuple(probabilities.shape)} probabilities vs {tuple(labels.shape)} labels")
    p = probabilities.clamp(EPS, 1 - EPS)
    return -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p)).mean()


def resolve_overlaps(scored: dict[Span, float]) -> list[Span]:
    """Greedy disjoint subset: highest probability first, then earlier start, then shorter."""
    taken = np.zeros(max((s.end for s in scored), default=-1) + 1, dtype=bool)
    keep = []
    for span in sorted(scored, key=lambda s: (-scored[s], s.start, s.width)):
        if not taken[span.start:span.end + 1].any():
            taken[span.start:span.end + 1] = True
            keep.append(span)
    return sorted(keep)


@dataclass
class SpanBatch:
    """Flattened candidate spans of a batch of token sequences."""

    rows: torch.Tensor
    starts: torch.Tensor
    ends: torch.Tensor
    sizes: list[int]

    @classmethod
    def build(cls, lengths: Sequence[int], max_width: int) -> "SpanBatch":
        rows, starts, ends, sizes = [], [], [], []
        for i, n in enumerate(lengths):
            s, e = span_arrays(n, max_width)
            rows.append(np.full(len(s), i, dtype=np.int64))
            starts.append(s)
            ends.append(e)
            sizes.append(len(s))
        cat = lambda parts: torch.from_numpy(np.concatenate(parts)) if parts else torch.zeros(0, dtype=torch.long)
        return cls(cat(rows), cat(starts), cat(ends), sizes)


class GapModel(nn.Module):
    """Encoder + span scorer; ``kind`` selects whether the exemplar is used."""

    def __init__(self, encoder, scorer: SpanScorer, kind: str = "example_aware", threshold: float = 0.5):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}")
        if scorer.k != encoder.k:
            raise DimensionMismatch(f"scorer k={scorer.k} but encoder k={encoder.k}")
        self.encoder = encoder
        self.scorer = scorer
        self.kind = kind
        self.threshold = threshold

    @property
    def max_width(self) -> int:
        return self.scorer.max_width

    @property
    def uses_exemplar(self) -> bool:
        return self.kind == "example_aware"

    @property
    def max_tokens(self) -> int:
        return self.encoder.max_tokens

    def tokenize(self, text: str) -> TokenizedText:
        return self.encoder.tokenize(text)

    # -- exemplars ---------------------------------------------------------

    def exemplar_tokens(self, marked: str) -> TokenizedText:
        """Tokenize a marked exemplar, cutting trailing sentences until it fits."""
        doc = parse_marked_text(marked, "exemplar")
        tok = self.encoder.tokenize(marked)
        limit = self.encoder.max_tokens
        if tok.n_tokens <= limit:
            return tok
        fitted = None
        kept: list[str] = []
        for sent in sentence_split(doc):
            kept.append(render_marked_text(sent))
            cand = self.encoder.tokenize(" ".join(kept))
            if cand.n_tokens > limit:
                break
            fitted = cand
        if fitted is not None:
            return fitted
        cut = tok.truncated(limit)
        open_at = None
        for i, t in enumerate(cut.tokens):
            if t == OPEN:
                open_at = i
            elif t == CLOSE:
                open_at = None
        return cut.truncated(open_at) if open_at is not None else cut

    def encode_exemplars(self, marked: Sequence[str]) -> torch.Tensor:
        toks = [self.exemplar_tokens(m) for m in marked]
        if not self.uses_exemplar:
            # Markers are still validated above; the baseline never reads the vectors.
            return torch.zeros(len(toks), self.scorer.k, dtype=self.scorer.w.dtype)
        return self.encoder.encode_batch(toks)[2]

    def encode_exemplar(self, marked: str) -> torch.Tensor:
        return self.encode_exemplars([marked])[0]

    # -- scoring -----------------------------------------------------------

    def batch_logits(self, toks: Sequence[TokenizedText], exemplars: torch.Tensor | None = None
                     ) -> tuple[torch.Tensor, SpanBatch]:
        """Logits of every candidate span of every sequence, flattened in batch order.

        ``exemplars`` is [B, k] (one per sequence) and ignored by the baseline.
        """
        hidden, _, _ = self.encoder.encode_batch(toks)
        spans = SpanBatch.build([t.n_tokens for t in toks], self.max_width)
        reps = self.scorer.represent(hidden[spans.rows, spans.starts], hidden[spans.rows, spans.ends],
                                     spans.ends - spans.starts + 1)
        h_ex = exemplars[spans.rows] if (self.uses_exemplar and exemplars is not None) else None
        return self.scorer.logits(reps, h_ex), spans

    @torch.no_grad()
    def span_probabilities(self, tok: TokenizedText, exemplars: torch.Tensor | None = None
                           ) -> tuple[list[Span], np.ndarray]:
        """Probabilities of every candidate span of ``tok`` under each exemplar.

        Returns the candidate list and an array of shape [E, S] (E = 1 for
        the baseline or when no exemplars are given).
        """
        hidden, _, _ = self.encoder.encode_batch([tok])
        starts, ends = span_arrays(tok.n_tokens, self.max_width)
        s, e = torch.from_numpy(starts), torch.from_numpy(ends)
        reps = self.scorer.represent(hidden[0, s], hidden[0, e], e - s + 1)
        if exemplars is None:
            logits = self.scorer.logits(reps)[None]
        elif self.uses_exemplar:
            exemplars = exemplars.reshape(-1, self.scorer.k)
            logits = self.scorer.logits(reps[None], exemplars[:, None, :])
        else:
            logits = self.scorer.logits(reps)[None].expand(exemplars.reshape(-1, self.scorer.k).shape[0], -1)
        spans = [Span(int(a), int(b)) for a, b in zip(starts, ends)]
        return spans, torch.sigmoid(logits).double().numpy()

    def predict(self, tok: TokenizedText, exemplar: str | torch.Tensor | None = None,
                threshold: float | None = None) -> dict[Span, float]:
        """Spans with probability >= threshold, mapped to their probability."""
        threshold = self.threshold if threshold is None else threshold
        if isinstance(exemplar, str):
            exemplar = self.encode_exemplar(exemplar)
        spans, probs = self.span_probabilities(tok, exemplar)
        return {sp: float(p) for sp, p in zip(spans, probs[0]) if p >= threshold}

    # -- persistence -------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> None:
        """Write the checkpoint atomically: build in a sibling temp dir, then rename."""
        directory = Path(directory)
        directory.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
        try:
            self.encoder.save(tmp / "encoder")
            save_state(self.scorer.state_dict(), tmp / "scorer.pt")
            (tmp / "model.json").write_text(json.dumps({
                "k": self.scorer.k, "d_w": self.scorer.d_w, "hidden": self.scorer.hidden,
                "max_width": self.max_width, "threshold": self.threshold, "model_kind": self.kind,
                "vocab_hash": self.encoder.vocab_hash,
                "dtype": str(self.scorer.w.dtype).removeprefix("torch."),
            }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            if directory.exists():
                old = directory.with_name(f".{directory.name}.old")
                shutil.rmtree(old, ignore_errors=True)
                directory.rename(old)
                tmp.rename(directory)
                shutil.rmtree(old)
            else:
                tmp.rename(directory)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "GapModel":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointMismatch(f"unreadable model checkpoint {directory}: {exc}") from exc
        encoder = load_encoder(directory / "encoder")
        if meta["k"] != encoder.k:
            raise CheckpointMismatch(f"scorer k={meta['k']} but encoder k={encoder.k}")
        if meta.get("vocab_hash") not in (None, encoder.vocab_hash):
            raise CheckpointMismatch("encoder vocabulary does not match the span scorer")
        scorer = SpanScorer(meta["k"], meta["d_w"], meta["max_width"], meta.get("hidden"),
                            dtype=getattr(torch, meta.get("dtype", "float32")))
        scorer.load_state_dict(load_state(directory / "scorer.pt"))
        model = cls(encoder, scorer, meta["model_kind"], meta["threshold"])
        model.eval()
        return model

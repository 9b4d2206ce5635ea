"""Text encoders producing per-token vectors plus a start-token (CLS) vector.

Two implementations share one duck-typed surface:

* ``TinyEncoder``: word-level vocabulary, embeddings and two attention
  mixing layers. Small enough for tests and the synthetic experiments.
* ``PretrainedAdapter``: wraps a Hugging Face masked LM and its fast tokenizer.

Both expose ``tokenize``, ``encode``, ``encode_batch``, ``k``, ``max_tokens``
and ``save``; ``load_encoder`` restores either from a checkpoint directory.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .corpus import CLOSE, OPEN
from .errors import CheckpointMismatch, SequenceTooLong
from .spans import TokenizedText

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
MARKERS = (OPEN, CLOSE)
SPECIALS = (PAD, CLS, UNK)


def vocab_hash(vocab: Sequence[str]) -> str:
    return hashlib.sha256(json.dumps(list(vocab), ensure_ascii=False).encode("utf-8")).hexdigest()


@dataclass
class EncoderConfig:
    k: int = 32
    max_len: int = 128
    vocab: list[str] = field(default_factory=lambda: list(SPECIALS))
    seed: int = 0
    n_layers: int = 2
    n_heads: int = 4
    piece_len: int | None = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.max_len < 16:
            raise ValueError("max_len must be at least 16")

    @property
    def vocab_hash(self) -> str:
        return vocab_hash(self.vocab)


def register_markers(config: EncoderConfig) -> EncoderConfig:
    """Return a config whose vocabulary holds the gap markers exactly once."""
    vocab = list(config.vocab)
    for tok in SPECIALS + MARKERS:
        if tok not in vocab:
            vocab.append(tok)
    return replace(config, vocab=vocab)


@dataclass
class EncodedSequence:
    token_vectors: torch.Tensor  # (N, k)
    sequence_vector: torch.Tensor  # (k,)


class WordTokenizer:
    """Regex word tokenizer; markers are always atomic tokens.

    ``piece_len`` chops longer words into fixed-size pieces, a crude stand-in
    for subword segmentation.
    """

    pattern = re.compile(r"\[\[|\]\]|\w+|[^\w\s]")

    def __init__(self, vocab: Sequence[str], piece_len: int | None = None):
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate entries in vocabulary")
        self.piece_len = piece_len
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.pad_id = self.index[PAD]

    def pieces(self, text: str) -> list[tuple[str, int, int]]:
        out = []
        for m in self.pattern.finditer(text):
            tok, s = m.group(), m.start()
            if self.piece_len and tok not in MARKERS and len(tok) > self.piece_len:
                for i in range(0, len(tok), self.piece_len):
                    out.append((tok[i:i + self.piece_len], s + i, s + min(i + self.piece_len, len(tok))))
            else:
                out.append((tok, s, m.end()))
        return out

    def __call__(self, text: str) -> TokenizedText:
        pieces = self.pieces(text)
        tokens = [p[0] if p[0] in MARKERS else p[0].lower() for p in pieces]
        return TokenizedText([self.index.get(t, self.unk_id) for t in tokens],
                             [(s, e) for _, s, e in pieces], text, tokens)

    @classmethod
    def build_vocab(cls, texts: Iterable[str], piece_len: int | None = None,
                    min_count: int = 1) -> list[str]:
        counts: Counter = Counter()
        probe = cls(list(SPECIALS + MARKERS), piece_len)
        for text in texts:
            counts.update(t.lower() for t, _, _ in probe.pieces(text) if t not in MARKERS)
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return list(SPECIALS + MARKERS) + words


class _MixingLayer(nn.Module):
    """Local width-3 convolution, multi-head self-attention, then a feed-forward block."""

    def __init__(self, k: int, heads: int = 4):
        super().__init__()
        if k % heads:
            raise ValueError(f"k={k} is not divisible by {heads} heads")
        self.heads = heads
        self.local = nn.Conv1d(k, k, kernel_size=3, padding=1)
        self.norm0 = nn.LayerNorm(k)
        self.q = nn.Linear(k, k)
        self.key = nn.Linear(k, k)
        self.v = nn.Linear(k, k)
        self.o = nn.Linear(k, k)
        self.norm1 = nn.LayerNorm(k)
        self.ff = nn.Sequential(nn.Linear(k, 2 * k), nn.GELU(), nn.Linear(2 * k, k))
        self.norm2 = nn.LayerNorm(k)
        self.scale = 1.0 / math.sqrt(k // heads)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x * mask[..., None]
        x = self.norm0(x + torch.relu(self.local(x.transpose(1, 2)).transpose(1, 2)))
        b, n, k = x.shape
        split = lambda t: t.view(b, n, self.heads, k // self.heads).transpose(1, 2)
        q, key, v = split(self.q(x)), split(self.key(x)), split(self.v(x))
        scores = q @ key.transpose(-1, -2) * self.scale
        scores = scores.masked_fill(~mask[:, None, None, :], torch.finfo(x.dtype).min)
        mixed = (torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, n, k)
        x = self.norm1(x + self.o(mixed))
        return self.norm2(x + self.ff(x))


class TinyEncoder(nn.Module):
    kind = "tiny"

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = register_markers(config)
        self.tokenizer = WordTokenizer(self.config.vocab, self.config.piece_len)
        k = self.config.k
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed)
            self.embed = nn.Embedding(len(self.config.vocab), k)
            self.position = nn.Embedding(self.config.max_len, k)
            nn.init.normal_(self.embed.weight, std=0.5)
            nn.init.normal_(self.position.weight, std=0.1)
            self.layers = nn.ModuleList(_MixingLayer(k, self.config.n_heads) for _ in range(self.config.n_layers))
        self.to(dtype)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def max_tokens(self) -> int:
        return self.config.max_len - 1  # start token takes one position

    @property
    def vocab_hash(self) -> str:
        return self.config.vocab_hash

    def tokenize(self, text: str) -> TokenizedText:
        return self.tokenizer(text)

    def encode_batch(self, toks: Sequence[TokenizedText]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Encode a batch; returns (token_vectors [B, L, k], mask [B, L], sequence_vectors [B, k])."""
        for i, t in enumerate(toks):
            if t.n_tokens > self.max_tokens:
                raise SequenceTooLong(t.n_tokens, self.max_tokens, i if len(toks) > 1 else None)
        width = 1 + max((t.n_tokens for t in toks), default=0)
        ids = torch.full((len(toks), width), self.tokenizer.pad_id, dtype=torch.long)
        mask = torch.zeros((len(toks), width), dtype=torch.bool)
        for i, t in enumerate(toks):
            ids[i, 0] = self.tokenizer.cls_id
            ids[i, 1:1 + t.n_tokens] = torch.tensor(t.token_ids, dtype=torch.long)
            mask[i, :1 + t.n_tokens] = True
        x = self.embed(ids) + self.position(torch.arange(width))[None]
        for layer in self.layers:
            x = layer(x, mask)
        return x[:, 1:], mask[:, 1:], x[:, 0]

    def encode(self, tok: TokenizedText) -> EncodedSequence:
        hidden, _, seq = self.encode_batch([tok])
        return EncodedSequence(hidden[0, :tok.n_tokens], seq[0])

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cfg = self.config
        _write_json(directory / "vocab.json", cfg.vocab)
        _write_json(directory / "config.json", {
            "kind": self.kind, "k": cfg.k, "max_len": cfg.max_len, "vocab_hash": cfg.vocab_hash,
            "seed": cfg.seed, "n_layers": cfg.n_layers, "n_heads": cfg.n_heads, "piece_len": cfg.piece_len,
            "dtype": str(self.embed.weight.dtype).removeprefix("torch."),
        })
        save_state(self.state_dict(), directory / "params.pt")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TinyEncoder":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
        vocab = json.loads((directory / "vocab.json").read_text(encoding="utf-8"))
        if vocab_hash(vocab) != meta["vocab_hash"]:
            raise CheckpointMismatch(f"vocabulary hash mismatch in {directory}")
        config = EncoderConfig(k=meta["k"], max_len=meta["max_len"], vocab=vocab, seed=meta["seed"],
                               n_layers=meta["n_layers"], n_heads=meta["n_heads"], piece_len=meta["piece_len"])
        enc = cls(config, dtype=getattr(torch, meta.get("dtype", "float32")))
        enc.load_state_dict(load_state(directory / "params.pt"))
        return enc


class PretrainedAdapter(nn.Module):
    """A Hugging Face encoder plus fast tokenizer behind the encoder surface.

    The gap markers are added as special tokens so the tokenizer never
    splits them; the embedding matrix is resized to match.
    """

    kind = "pretrained"

    def __init__(self, model, tokenizer, name: str = "custom"):
        super().__init__()
        added = tokenizer.add_special_tokens({"additional_special_tokens": list(MARKERS)})
        if added:
            model.resize_token_embeddings(len(tokenizer))
        self.model = model
        self.hf_tokenizer = tokenizer
        self.name = name
        self.max_len = min(getattr(model.config, "max_position_embeddings", 512),
                           tokenizer.model_max_length or 512)
        # RoBERTa-style position ids start after the padding index.
        if getattr(model.config, "model_type", "") in ("roberta", "xlm-roberta", "camembert"):
            self.max_len -= model.config.pad_token_id + 1

    @classmethod
    def from_pretrained(cls, name: str, cache_dir: str | None = None) -> "PretrainedAdapter":
        from transformers import AutoModel, AutoTokenizer

        cache_dir = cache_dir or os.environ.get("GAPFORGE_CACHE")
        tokenizer = AutoTokenizer.from_pretrained(name, cache_dir=cache_dir, use_fast=True)
        model = AutoModel.from_pretrained(name, cache_dir=cache_dir)
        return cls(model, tokenizer, name)

    @property
    def k(self) -> int:
        return self.model.config.hidden_size

    @property
    def max_tokens(self) -> int:
        return self.max_len - 2  # start + end special tokens

    @property
    def vocab_hash(self) -> str:
        vocab = sorted(self.hf_tokenizer.get_vocab().items(), key=lambda kv: kv[1])
        return vocab_hash([t for t, _ in vocab])

    def tokenize(self, text: str) -> TokenizedText:
        enc = self.hf_tokenizer(text, add_special_tokens=False, return_offsets_mapping=True)
        ids, offsets = [], []
        prev = 0
        for tid, (s, e) in zip(enc["input_ids"], enc["offset_mapping"]):
            s = max(s, prev)
            e = max(e, s)
            if e == s:  # zero-width pieces such as a lone sentencepiece prefix
                continue
            ids.append(tid)
            offsets.append((s, e))
            prev = e
        return TokenizedText(ids, offsets, text, self.hf_tokenizer.convert_ids_to_tokens(ids))

    def encode_batch(self, toks: Sequence[TokenizedText]):
        for i, t in enumerate(toks):
            if t.n_tokens > self.max_tokens:
                raise SequenceTooLong(t.n_tokens, self.max_tokens, i if len(toks) > 1 else None)
        tk = self.hf_tokenizer
        width = 2 + max((t.n_tokens for t in toks), default=0)
        ids = torch.full((len(toks), width), tk.pad_token_id, dtype=torch.long)
        attn = torch.zeros((len(toks), width), dtype=torch.long)
        for i, t in enumerate(toks):
            row = [tk.cls_token_id, *t.token_ids, tk.sep_token_id]
            ids[i, :len(row)] = torch.tensor(row)
            attn[i, :len(row)] = 1
        hidden = self.model(input_ids=ids, attention_mask=attn).last_hidden_state
        mask = torch.zeros((len(toks), width - 2), dtype=torch.bool)
        for i, t in enumerate(toks):
            mask[i, :t.n_tokens] = True
        return hidden[:, 1:-1], mask, hidden[:, 0]

    def encode(self, tok: TokenizedText) -> EncodedSequence:
        hidden, _, seq = self.encode_batch([tok])
        return EncodedSequence(hidden[0, :tok.n_tokens], seq[0])

    def save(self, directory: str | os.PathLike) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.model.save_pretrained(directory / "hf_model")
        self.hf_tokenizer.save_pretrained(directory / "hf_model")
        _write_json(directory / "config.json", {
            "kind": self.kind, "name": self.name, "k": self.k, "max_len": self.max_len,
            "vocab_hash": self.vocab_hash, "seed": None,
        })

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "PretrainedAdapter":
        from transformers import AutoModel, AutoTokenizer

        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
        adapter = cls(AutoModel.from_pretrained(directory / "hf_model"),
                      AutoTokenizer.from_pretrained(directory / "hf_model"), meta.get("name", "custom"))
        if adapter.vocab_hash != meta["vocab_hash"]:
            raise CheckpointMismatch(f"vocabulary hash mismatch in {directory}")
        return adapter


def load_encoder(directory: str | os.PathLike):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"unreadable encoder config in {directory}: {exc}") from exc
    kinds = {"tiny": TinyEncoder, "pretrained": PretrainedAdapter}
    if meta.get("kind") not in kinds:
        raise CheckpointMismatch(f"unknown encoder kind {meta.get('kind')!r}")
    return kinds[meta["kind"]].load(directory)


def save_state(state: dict, path: Path) -> None:
    # Plain dict of contiguous CPU tensors keeps the pickle byte-stable across runs.
    torch.save({k: v.detach().cpu().contiguous() for k, v in state.items()}, path)


def load_state(path: Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")

"""``gapforge`` command line: prepare, train, tune, eval, generate.

Exit codes: 0 success, 1 usage or config error, 2 data/checkpoint
incompatibility, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .corpus import (ExerciseDocument, atomic_write_text, by_split, compute_stats, load_corpus,
                     make_gap, parse_marked_text, render_marked_text, render_student_view, save_corpus,
                     sentence_spans, strip_markup)
from .errors import (CheckpointMismatch, EmptyCorpus, GapforgeError, IoFailure, MarkerError,
                     MissingTense, NoAnnotatedDev, NonFiniteLoss, SchemaViolation, SequenceTooLong)
from .evaluation import (binary_eval, build_tense_exemplars, disentangle_eval, load_exemplars,
                         remove_documents, save_exemplars)
from .model import GapModel, resolve_overlaps
from .training import TrainConfig, build_encoder, final_train, train, tune_negative_ratio

logger = logging.getLogger("gapforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (SchemaViolation, MarkerError, CheckpointMismatch, EmptyCorpus, NoAnnotatedDev,
               MissingTense, IoFailure, SequenceTooLong)
SPLIT_PROPORTIONS = {"train": 618, "dev": 50, "test": 100}


class UsageError(GapforgeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests -----------------------------------------------------------------

def blob_hash(data: bytes) -> str:
    """Git blob object id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_path(path: str | os.PathLike) -> str | dict | None:
    path = Path(path)
    if path.is_file():
        return blob_hash(path.read_bytes())
    if path.is_dir():
        return {str(p.relative_to(path)): blob_hash(p.read_bytes())
                for p in sorted(path.rglob("*")) if p.is_file()}
    return None


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, object] = field(default_factory=dict)
    outputs: dict[str, object] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: str = __version__

    @classmethod
    def create(cls, command, config, seed, inputs=(), outputs=(), **extra) -> "RunManifest":
        return cls(command, config, seed, {str(p): hash_path(p) for p in inputs},
                   {str(p): hash_path(p) for p in outputs}, extra)

    def write(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def stale(self) -> list[str]:
        """Recorded paths whose current content hash differs from the manifest."""
        recorded = {**self.inputs, **self.outputs}
        return [p for p, h in recorded.items() if hash_path(p) != h]


# -- config --------------------------------------------------------------------

def resolve_config(args) -> TrainConfig:
    """Built-in defaults < config file < command-line flags."""
    data = TrainConfig().to_dict()
    if getattr(args, "config", None):
        try:
            data.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {"seed": args.seed, "threshold": getattr(args, "threshold", None),
                 "max_span_width": getattr(args, "max_width", None),
                 "model_kind": getattr(args, "model", None),
                 "epochs": getattr(args, "epochs", None),
                 "learning_rate": getattr(args, "lr", None),
                 "neg_ratio": getattr(args, "neg_ratio", None)}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


# -- prepare -------------------------------------------------------------------

def read_raw_dir(raw_dir: Path) -> list[ExerciseDocument]:
    files = sorted(p for p in raw_dir.iterdir() if p.suffix in (".txt", ".jsonl") and p.is_file()) \
        if raw_dir.is_dir() else []
    if not files:
        raise EmptyCorpus(f"no .txt or .jsonl files in {raw_dir}")
    docs = []
    for path in files:
        try:
            if path.suffix == ".jsonl":
                docs.extend(load_corpus(path))
            else:
                raw = path.read_text(encoding="utf-8")
                docs.append(parse_marked_text(strip_markup(raw), path.stem).validate())
        except (SchemaViolation, MarkerError) as exc:
            raise type(exc)(f"{path.name}: {exc}") from exc
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("duplicate document ids across raw files")
    return docs


def assign_splits(docs: list[ExerciseDocument], seed: int) -> list[ExerciseDocument]:
    """Random split of unassigned documents in the 618/50/100 proportions."""
    todo = [i for i, d in enumerate(docs) if d.split == "unassigned"]
    if not todo:
        return docs
    order = np.random.default_rng(seed).permutation(len(todo))
    total = sum(SPLIT_PROPORTIONS.values())
    n_dev = round(len(todo) * SPLIT_PROPORTIONS["dev"] / total)
    n_test = round(len(todo) * SPLIT_PROPORTIONS["test"] / total)
    out = list(docs)
    for rank, j in enumerate(order):
        split = "test" if rank < n_test else "dev" if rank < n_test + n_dev else "train"
        d = docs[todo[j]]
        out[todo[j]] = ExerciseDocument(d.id, d.text, d.gaps, split)
    return out


def cmd_prepare(args) -> int:
    seed = args.seed if args.seed is not None else 0
    docs = assign_splits(read_raw_dir(Path(args.raw_dir)), seed)
    docs.sort(key=lambda d: d.id)
    save_corpus(docs, args.out_corpus)
    stats = compute_stats(docs)
    print(stats.format_table())
    RunManifest.create("prepare", {"raw_dir": str(args.raw_dir)}, seed,
                       inputs=sorted(Path(args.raw_dir).iterdir()), outputs=[args.out_corpus],
                       stats=asdict(stats)).write(f"{args.out_corpus}.manifest.json")
    return EXIT_OK


# -- train / tune --------------------------------------------------------------

def _set_threads(workers: int) -> None:
    torch.set_num_threads(max(1, workers))
    if workers <= 1:
        torch.use_deterministic_algorithms(True)


def cmd_train(args) -> int:
    config = resolve_config(args)
    _set_threads(args.workers)
    corpus = load_corpus(args.corpus)
    train_docs = by_split(corpus, "train")
    if not train_docs:
        raise EmptyCorpus(f"{args.corpus} has no train split")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    docs = train_docs + (by_split(corpus, "dev") if args.final else [])
    encoder = build_encoder(config, docs)
    model = train(docs, config, encoder, config.model_kind, log_path=out / "run_log.jsonl")
    model.save(out / "checkpoint")
    RunManifest.create("train", config.to_dict(), config.seed, inputs=[args.corpus],
                       outputs=[out / "checkpoint"], final=args.final,
                       probe_loss_initial=model.initial_probe_loss).write(out / "manifest.json")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return EXIT_OK


def cmd_tune(args) -> int:
    config = resolve_config(args)
    _set_threads(args.workers)
    corpus = load_corpus(args.corpus)
    train_docs, dev_docs = by_split(corpus, "train"), by_split(corpus, "dev")
    if not train_docs:
        raise EmptyCorpus(f"{args.corpus} has no train split")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = tuple(args.labels.split(",")) if args.labels else None
    exemplars = None
    if args.exemplars:
        exemplars = load_exemplars(args.exemplars)
        dev_docs = remove_documents(dev_docs, {e.source_id for e in exemplars})
    best, scores = tune_negative_ratio(train_docs, dev_docs, config, None, exemplars, labels,
                                       config.model_kind)
    result = {"best_ratio": best, "dev_macro_f1": {str(r): s for r, s in scores.items()}}
    atomic_write_text(out / "tune.json", json.dumps(result, indent=2) + "\n")
    RunManifest.create("tune", config.to_dict(), config.seed, inputs=[args.corpus],
                       outputs=[out / "tune.json"], best_ratio=best).write(out / "manifest.json")
    print(f"best negative ratio: {best}")
    if args.then_train:
        cfg = resolve_config(args)
        docs = train_docs + dev_docs
        model = final_train(train_docs, dev_docs, best, cfg, build_encoder(cfg, docs), cfg.model_kind,
                            log_path=out / "run_log.jsonl")
        model.save(out / "checkpoint")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = GapModel.load(args.checkpoint)
    if args.threshold is not None:
        model.threshold = args.threshold
    if args.max_width is not None and args.max_width != model.max_width:
        raise CheckpointMismatch(f"checkpoint was trained with max width {model.max_width}")
    torch.set_num_threads(max(1, args.workers))
    corpus = load_corpus(args.corpus)
    docs = by_split(corpus, args.split) if args.split != "all" else corpus
    dump: list = []
    extra = {}
    if args.protocol == "binary":
        report = binary_eval(model, docs, workers=args.workers, dump=dump)
    else:
        labels = tuple(args.labels.split(",")) if args.labels else None
        if args.exemplars:
            exemplars = load_exemplars(args.exemplars)
            removed = {e.source_id for e in exemplars}
        else:
            exemplars, removed = build_tense_exemplars(corpus, labels or _tenses(), seed=args.seed or 0)
            save_exemplars(exemplars, f"{args.out_report}.exemplars.jsonl")
        docs = remove_documents(docs, removed)
        extra["removed_documents"] = sorted(removed)
        report = disentangle_eval(model, docs, exemplars, labels or _tenses(), workers=args.workers, dump=dump)
    payload = {"protocol": args.protocol, **report.to_dict(), **extra,
               "checkpoint_fingerprint": blob_hash(json.dumps(hash_path(args.checkpoint), sort_keys=True).encode()),
               "corpus_hash": hash_path(args.corpus), "split": args.split}
    atomic_write_text(args.out_report, json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    if args.dump:
        atomic_write_text(args.dump, "".join(json.dumps(d, ensure_ascii=False) + "\n" for d in dump))
    RunManifest.create("eval", {"protocol": args.protocol, "split": args.split}, args.seed,
                       inputs=[args.checkpoint, args.corpus], outputs=[args.out_report]
                       ).write(f"{args.out_report}.manifest.json")
    print(report.format_table())
    return EXIT_OK


def _tenses():
    from .corpus import TENSES

    return TENSES


# -- generate ------------------------------------------------------------------

def generate(model: GapModel, exemplar_marked: str, text: str) -> tuple[ExerciseDocument, list[dict]]:
    """Gap ``text`` after ``exemplar_marked``; returns the exercise and per-sentence scores."""
    exemplar = model.encode_exemplars([exemplar_marked])
    spans = []  # document-level (start, end)
    scores = []
    for idx, (base, end) in enumerate(sentence_spans(text)):
        sentence = text[base:end]
        tok = model.tokenize(sentence)
        if tok.n_tokens > model.max_tokens:
            raise SequenceTooLong(tok.n_tokens, model.max_tokens, idx)
        predicted = model.predict(tok, exemplar)
        kept = resolve_overlaps(predicted)
        for sp in kept:
            s, e = tok.char_span(sp)
            spans.append((base + s, base + e))
        scores.append({"sentence": idx, "spans": [
            {"start": sp.start, "end": sp.end, "text": sentence[slice(*tok.char_span(sp))],
             "probability": p, "kept": sp in kept} for sp, p in sorted(predicted.items())]})
    return ExerciseDocument("generated", text, tuple(make_gap(text, s, e) for s, e in sorted(spans))), scores


def cmd_generate(args) -> int:
    model = GapModel.load(args.checkpoint)
    if args.threshold is not None:
        model.threshold = args.threshold
    exemplar = Path(args.exemplar_file).read_text(encoding="utf-8").strip()
    parse_marked_text(exemplar, str(args.exemplar_file))
    text = Path(args.input_file).read_text(encoding="utf-8").strip()
    doc, scores = generate(model, exemplar, text)
    rendered = render_marked_text(doc) if args.format == "markers" else render_student_view(doc, args.blank)
    atomic_write_text(args.out_file, rendered + "\n")
    if args.scores:
        atomic_write_text(args.scores, "".join(json.dumps(s, ensure_ascii=False) + "\n" for s in scores))
    RunManifest.create("generate", {"format": args.format, "threshold": model.threshold}, args.seed,
                       inputs=[args.checkpoint, args.exemplar_file, args.input_file],
                       outputs=[args.out_file]).write(f"{args.out_file}.manifest.json")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON training config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--threshold", type=float, help="probability threshold (default 0.5)")
    common.add_argument("--max-width", type=int, help="maximum span width in tokens (default 12)")
    common.add_argument("--model", choices=("baseline", "example_aware"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gapforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="clean raw exercises into a JSONL corpus")
    p.add_argument("raw_dir")
    p.add_argument("out_corpus")
    p.set_defaults(func=cmd_prepare)

    for name, func in (("train", cmd_train), ("tune", cmd_tune)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("corpus")
        p.add_argument("out_dir")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--neg-ratio", type=float)
            p.add_argument("--final", action="store_true", help="train on train and dev together")
        else:
            p.add_argument("--exemplars", help="fixed per-type exemplars (JSONL)")
            p.add_argument("--labels", help="comma-separated gap types (default: the 12 tenses)")
            p.add_argument("--then-train", action="store_true",
                           help="retrain on train and dev with the chosen ratio")

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--protocol", choices=("binary", "disentangle"), default="binary")
    p.add_argument("--split", default="test")
    p.add_argument("--exemplars", help="fixed per-type exemplars (JSONL)")
    p.add_argument("--labels", help="comma-separated gap types (default: the 12 tenses)")
    p.add_argument("--dump", help="write predictions as JSONL")
    p.add_argument("--out-report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", parents=[common])
    p.add_argument("checkpoint")
    p.add_argument("exemplar_file")
    p.add_argument("input_file")
    p.add_argument("out_file")
    p.add_argument("--format", choices=("markers", "blanks"), default="markers")
    p.add_argument("--blank", default="____")
    p.add_argument("--scores", help="write span probabilities as JSONL")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gapforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"gapforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, GapforgeError, RuntimeError, OSError) as exc:
        print(f"gapforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

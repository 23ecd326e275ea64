"""Vocabulary, toy seq2seq corpora, TSV dataset files and batching."""

from __future__ import annotations

import hashlib
import itertools
import logging
import random
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, CLS, SEP, MASK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3

TASKS = ("copy", "reverse", "sort_tokens", "templated_paraphrase")


class DataError(ValueError):
    """Malformed dataset file or infeasible generation request."""


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocab must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab tokens must be unique")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str | Sequence[str]) -> list[int]:
        toks = text.split() if isinstance(text, str) else text
        try:
            return [self.stoi[t] for t in toks]
        except KeyError as e:
            raise DataError(f"token {e.args[0]!r} not in vocab") from None

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> str:
        toks = (self.itos[i] for i in ids)
        if strip_specials:
            toks = (t for t in toks if t not in SPECIALS)
        return " ".join(toks)

    def content_ids(self) -> list[int]:
        return list(range(len(SPECIALS), len(self.itos)))

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Whitespace vocab ordered by descending frequency, then lexicographically."""
    counts = Counter(tok for line in corpus for tok in line.split() if tok not in SPECIALS)
    if not counts:
        raise DataError("cannot build a vocab from an empty corpus")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + ordered)


@dataclass(frozen=True)
class Example:
    """One text pair.  ``pseudo`` is set only for statically mixed examples."""

    source: str
    target: str
    alternatives: tuple[str, ...] = ()
    pseudo: str | None = None

    @property
    def references(self) -> tuple[str, ...]:
        return (self.target,) + self.alternatives


@dataclass(frozen=True)
class SequencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]
    references: tuple[tuple[int, ...], ...] = ()
    pseudo: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("source", "target"):
            body = getattr(self, name)
            if len(body) < 1:
                raise DataError(f"{name} must be nonempty")
            if any(t < len(SPECIALS) for t in body):
                raise DataError(f"special id inside {name} body: {body}")


def encode_example(vocab: Vocab, ex: Example) -> SequencePair:
    return SequencePair(
        source=tuple(vocab.encode(ex.source)),
        target=tuple(vocab.encode(ex.target)),
        references=tuple(tuple(vocab.encode(r)) for r in ex.references),
        pseudo=None if ex.pseudo is None else tuple(vocab.encode(ex.pseudo)),
    )


# ---------------------------------------------------------------- toy tasks


@dataclass
class ToyTaskSpec:
    task: str = "reverse"
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 12
    n_train: int = 5000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0
    n_templates: int = 2

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if self.vocab_size < 1:
            raise DataError("vocab_size must be positive")
        if self.task == "templated_paraphrase" and self.n_templates < 2:
            raise DataError("templated_paraphrase needs n_templates >= 2")


def alphabet(n: int) -> list[str]:
    """``n`` distinct lowercase word tokens: a..z, then aa, ab, ..."""
    out: list[str] = []
    for width in itertools.count(1):
        for combo in itertools.product(string.ascii_lowercase, repeat=width):
            out.append("".join(combo))
            if len(out) == n:
                return out
    return out


def _paraphrase_rewrites(words: list[str], n_templates: int) -> list[str]:
    # each template = a marker token + a per-template synonym for every word
    return [" ".join([f"T{j}"] + [f"{w}{j}" for w in words]) for j in range(n_templates)]


@dataclass
class Dataset:
    train: list[Example] = field(default_factory=list)
    valid: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def corpus(self) -> Iterator[str]:
        for split in self.splits().values():
            for ex in split:
                yield ex.source
                yield from ex.references
                if ex.pseudo is not None:
                    yield ex.pseudo


def gen_task(spec: ToyTaskSpec) -> Dataset:
    rng = random.Random(spec.seed)
    words = alphabet(spec.vocab_size)
    order = {w: i for i, w in enumerate(words)}
    total = spec.n_train + spec.n_valid + spec.n_test
    capacity = sum(spec.vocab_size**n for n in range(spec.min_len, spec.max_len + 1))
    if total > capacity:
        raise DataError(
            f"infeasible split: {total} distinct sources requested, only {capacity} exist"
        )

    sources: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    while len(sources) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise DataError(f"could not draw {total} distinct sources")
        n = rng.randint(spec.min_len, spec.max_len)
        src = tuple(rng.choice(words) for _ in range(n))
        if src not in seen:
            seen.add(src)
            sources.append(src)

    examples = []
    for src in sources:
        s = list(src)
        if spec.task == "copy":
            ex = Example(" ".join(s), " ".join(s))
        elif spec.task == "reverse":
            ex = Example(" ".join(s), " ".join(reversed(s)))
        elif spec.task == "sort_tokens":
            ex = Example(" ".join(s), " ".join(sorted(s, key=order.__getitem__)))
        else:
            rewrites = _paraphrase_rewrites(s, spec.n_templates)
            k = rng.randrange(spec.n_templates)
            alts = tuple(r for j, r in enumerate(rewrites) if j != k)
            ex = Example(" ".join(s), rewrites[k], alts)
        examples.append(ex)

    a, b = spec.n_train, spec.n_train + spec.n_valid
    return Dataset(examples[:a], examples[a:b], examples[b:])


# ---------------------------------------------------------------- TSV I/O

_PSEUDO_SEP = f" {SEP} "


def format_line(ex: Example) -> str:
    src = ex.source if ex.pseudo is None else ex.pseudo + _PSEUDO_SEP + ex.source
    return "\t".join((src, ex.target) + ex.alternatives)


def parse_line(line: str, lineno: int = 0) -> Example:
    cols = line.rstrip("\n").split("\t")
    if len(cols) < 2 or not all(c.strip() for c in cols):
        raise DataError(f"line {lineno}: expected 'source<TAB>target[<TAB>alt...]'")
    src, pseudo = cols[0], None
    if _PSEUDO_SEP in src:
        pseudo, src = src.split(_PSEUDO_SEP, 1)
    return Example(src, cols[1], tuple(cols[2:]), pseudo)


def save_dataset(examples: Sequence[Example], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(format_line(ex) + "\n")


def load_dataset(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


# ---------------------------------------------------------------- batching


def packed_length(pair: SequencePair) -> int:
    """Packed length of the training layout, specials included."""
    n = len(pair.source) + len(pair.target) + 3
    if pair.pseudo is not None:
        n += len(pair.pseudo) + 1
    return n


class BatchStream:
    """One shuffled epoch of batches; oversize examples are dropped and counted."""

    def __init__(self, dataset: Sequence[SequencePair], batch_size: int,
                 rng: random.Random, max_positions: int | None = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = batch_size
        self.skipped = 0
        keep = []
        for ex in dataset:
            if max_positions is not None and packed_length(ex) > max_positions:
                self.skipped += 1
            else:
                keep.append(ex)
        if self.skipped:
            log.warning("skipped %d examples longer than %s positions", self.skipped, max_positions)
        order = list(range(len(keep)))
        rng.shuffle(order)
        self._items = [keep[i] for i in order]

    def __iter__(self) -> Iterator[list[SequencePair]]:
        for i in range(0, len(self._items), self.batch_size):
            yield self._items[i:i + self.batch_size]

    def __len__(self) -> int:
        return -(-len(self._items) // self.batch_size)


def make_batches(dataset, batch_size, rng, max_positions=None) -> BatchStream:
    return BatchStream(dataset, batch_size, rng, max_positions)

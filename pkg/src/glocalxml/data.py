"""Corpus files, vocabulary, [CLS]-prefixed encoding and synthetic corpora."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ParseError, RangeError, ValidationError

CLS, PAD, UNK = "[CLS]", "[PAD]", "[UNK]"
CLS_ID, PAD_ID, UNK_ID = 0, 1, 2
RESERVED = (CLS, PAD, UNK)

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, punctuation and underscores."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Example:
    labels: frozenset[int]
    text: str = ""
    token_ids: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def encoded(self) -> bool:
        return self.token_ids is not None


@dataclass(frozen=True)
class Corpus:
    examples: tuple[Example, ...]
    num_labels: int
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_labels < 1:
            raise ValidationError(f"num_labels must be >= 1, got {self.num_labels}")
        for i, ex in enumerate(self.examples):
            for lab in ex.labels:
                if not 0 <= lab < self.num_labels:
                    raise RangeError(f"example {i}: label {lab} outside [0, {self.num_labels})")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return replace(self, examples=self.examples[i])
        return self.examples[i]

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return replace(self, examples=tuple(self.examples[i] for i in indices))

    def label_sets(self) -> list[frozenset[int]]:
        return [ex.labels for ex in self.examples]


def parse_labels(field_text: str, num_labels: int, line: int | None = None) -> frozenset[int]:
    field_text = field_text.strip()
    if not field_text:
        raise ParseError("empty label field", line)
    labels = set()
    for part in field_text.split(","):
        part = part.strip()
        if not part.isdigit():
            raise ParseError(f"bad label id {part!r}", line)
        lab = int(part)
        if lab >= num_labels:
            raise RangeError(f"line {line}: label {lab} >= label space size {num_labels}")
        labels.add(lab)
    return frozenset(labels)


def load_corpus(path: str | Path, label_space_size: int) -> Corpus:
    """Read a ``lab1,lab2,...<TAB>text`` file, one document per line."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("missing TAB between labels and text", lineno)
            label_field, text = line.split("\t", 1)
            examples.append(Example(parse_labels(label_field, label_space_size, lineno), text))
    return Corpus(tuple(examples), label_space_size)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            labels = ",".join(str(lab) for lab in sorted(ex.labels))
            fh.write(f"{labels}\t{ex.text}\n")


class Vocab:
    """Token <-> id map with ids 0, 1, 2 reserved for [CLS], [PAD], [UNK]."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValidationError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(corpus: Corpus, min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Most-frequent-first vocabulary; equal counts are ordered lexicographically."""
    if len(corpus) == 0:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for ex in corpus.examples:
        counts.update(tokenize(ex.text))
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocab(kept)


def encode(vocab: Vocab, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] tok_1 .. tok_k [PAD] ..`` ids of length ``max_len`` plus the real-token mask."""
    if max_len < 2:
        raise ValidationError(f"max_len must be >= 2, got {max_len}")
    content = [vocab.id(tok) for tok in tokenize(text)][: max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1 : 1 + len(content)] = content
    mask = np.zeros(max_len, dtype=bool)
    mask[: 1 + len(content)] = True
    return ids, mask


def decode(vocab: Vocab, token_ids: Sequence[int], mask: Sequence[bool] | None = None) -> list[str]:
    """Tokens of an encoded sequence, without [CLS] and padding."""
    out = []
    for pos, idx in enumerate(token_ids):
        if pos == 0 or (mask is not None and not mask[pos]) or idx == PAD_ID:
            continue
        out.append(vocab.token(int(idx)))
    return out


def encode_corpus(corpus: Corpus, vocab: Vocab, max_len: int) -> Corpus:
    examples = []
    for ex in corpus.examples:
        ids, mask = encode(vocab, ex.text, max_len)
        examples.append(replace(ex, token_ids=ids, mask=mask))
    return replace(corpus, examples=tuple(examples))


@dataclass(frozen=True)
class Batch:
    examples: tuple[Example, ...]
    token_ids: np.ndarray
    mask: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> list[frozenset[int]]:
        return [ex.labels for ex in self.examples]


def make_batch(examples: Sequence[Example], num_labels: int, trim: bool = False) -> Batch:
    """Stack encoded examples; ``trim`` drops trailing columns that are padding in every row."""
    if not examples:
        raise ValidationError("empty batch")
    if any(not ex.encoded for ex in examples):
        raise ValidationError("batch examples must be encoded first (see encode_corpus)")
    targets = np.zeros((len(examples), num_labels))
    for i, ex in enumerate(examples):
        targets[i, list(ex.labels)] = 1.0
    ids = np.stack([ex.token_ids for ex in examples])
    mask = np.stack([ex.mask for ex in examples])
    if trim:
        width = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
    return Batch(tuple(examples), ids, mask, targets)


def batches(corpus: Corpus, batch_size: int, shuffle_seed: int | None = None,
            trim: bool = False) -> Iterator[Batch]:
    """Yield encoded batches; the last one may be short. No shuffle when the seed is None."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        order = np.random.Generator(np.random.PCG64(shuffle_seed)).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        chunk = [corpus.examples[i] for i in order[start : start + batch_size]]
        yield make_batch(chunk, corpus.num_labels, trim)


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class TopicRule:
    """Label ``label`` fires when topic ``topic`` holds at least ``threshold`` of the mixture."""

    topic: int
    threshold: float
    label: int


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-keyword corpus description.

    Documents mix ``num_topics`` filler-word topics. Each topic rule turns a
    dominant topic into a label; each keyword label fires exactly when its
    trigger token is planted in the text. ``keyword_map`` and
    ``global_topic_rules`` are derived from the counts when left empty.
    """

    num_docs: int = 2000
    num_labels: int = 50
    vocab_size: int = 400
    doc_len: tuple[int, int] = (24, 48)
    num_topics: int = 10
    topic_threshold: float = 0.3
    topic_concentration: float = 0.3
    keywords_per_doc: tuple[int, int] = (1, 3)
    keyword_map: tuple[tuple[int, str], ...] = ()
    global_topic_rules: tuple[TopicRule, ...] = ()
    noise: float = 0.0
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if not self.global_topic_rules:
            rules = tuple(
                TopicRule(t, self.topic_threshold, t) for t in range(min(self.num_topics, self.num_labels))
            )
            object.__setattr__(self, "global_topic_rules", rules)
        if not self.keyword_map:
            used = {r.label for r in self.global_topic_rules}
            kw = tuple((lab, f"kw{lab}") for lab in range(self.num_labels) if lab not in used)
            object.__setattr__(self, "keyword_map", kw)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.doc_len
        if self.num_docs < 1 or self.num_labels < 1 or self.num_topics < 1:
            raise ValidationError("num_docs, num_labels and num_topics must be positive")
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad doc_len range {self.doc_len}")
        if self.vocab_size < self.num_topics:
            raise ValidationError("vocab_size must be at least num_topics")
        if not 0.0 <= self.noise < 1.0 or not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("noise must lie in [0, 1) and test_fraction in (0, 1)")
        kmin, kmax = self.keywords_per_doc
        if not 0 <= kmin <= kmax:
            raise ValidationError(f"bad keywords_per_doc {self.keywords_per_doc}")
        triggers = [tok for _, tok in self.keyword_map]
        if len(set(triggers)) != len(triggers):
            raise ValidationError("keyword trigger tokens must be distinct")
        for lab, tok in self.keyword_map:
            if not 0 <= lab < self.num_labels:
                raise ValidationError(f"keyword label {lab} outside label space")
            if tokenize(tok) != [tok]:
                raise ValidationError(f"trigger {tok!r} is not a single lowercase token")
            if re.fullmatch(r"w\d+", tok):
                raise ValidationError(f"trigger {tok!r} collides with filler words")
        kw_labels = [lab for lab, _ in self.keyword_map]
        if len(set(kw_labels)) != len(kw_labels):
            raise ValidationError("a label may have at most one trigger token")
        for r in self.global_topic_rules:
            if not 0 <= r.topic < self.num_topics or not 0 <= r.label < self.num_labels:
                raise ValidationError(f"rule {r} references an invalid topic or label")
            if not 0.0 < r.threshold <= 1.0:
                raise ValidationError(f"rule {r} threshold must lie in (0, 1]")
        if set(kw_labels) & {r.label for r in self.global_topic_rules}:
            raise ValidationError("a label cannot be both keyword- and topic-driven")


@dataclass(frozen=True)
class SyntheticDoc:
    index: int
    tokens: tuple[str, ...]
    mixture: np.ndarray = field(compare=False)
    planted: tuple[int, ...]
    clean_labels: frozenset[int]
    labels: frozenset[int]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def _topic_word_table(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-topic word distributions over filler words ``w0..w{V-1}``.

    Each topic concentrates most of its mass on its own block of words and
    leaves a shared background so documents overlap lexically.
    """
    V, K = spec.vocab_size, spec.num_topics
    block = V // K
    table = np.full((K, V), 0.2 / V)
    for k in range(K):
        own = np.arange(k * block, (k + 1) * block)
        weights = rng.gamma(1.0, 1.0, size=own.size)
        table[k, own] += 0.8 * weights / weights.sum()
    return table / table.sum(axis=1, keepdims=True)


def rule_labels(spec: SyntheticSpec, mixture: np.ndarray, tokens: Sequence[str]) -> frozenset[int]:
    """Noise-free label set implied by a topic mixture and a token sequence."""
    labels = {r.label for r in spec.global_topic_rules if mixture[r.topic] >= r.threshold}
    present = set(tokens)
    labels.update(lab for lab, tok in spec.keyword_map if tok in present)
    return frozenset(labels)


def synthesize_documents(spec: SyntheticSpec) -> list[SyntheticDoc]:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    table = _topic_word_table(spec, rng)
    cumulative = np.cumsum(table, axis=1)
    filler = [f"w{i}" for i in range(spec.vocab_size)]
    docs = []
    lo, hi = spec.doc_len
    kmin, kmax = spec.keywords_per_doc
    for index in range(spec.num_docs):
        while True:
            mixture = rng.dirichlet(np.full(spec.num_topics, spec.topic_concentration))
            if any(mixture[r.topic] >= r.threshold for r in spec.global_topic_rules) or spec.keyword_map:
                break
        length = int(rng.integers(lo, hi + 1))
        topics = rng.choice(spec.num_topics, size=length, p=mixture)
        draws = rng.random(length)
        word_ids = (cumulative[topics] < draws[:, None]).sum(axis=1).clip(max=spec.vocab_size - 1)
        words = [filler[w] for w in word_ids]
        n_kw = min(int(rng.integers(kmin, kmax + 1)), len(spec.keyword_map))
        picks = rng.choice(len(spec.keyword_map), size=n_kw, replace=False) if n_kw else []
        planted = tuple(sorted(spec.keyword_map[i][0] for i in picks))
        trigger = dict(spec.keyword_map)
        for lab in planted:
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, trigger[lab])
        tokens = tuple(words)
        clean = rule_labels(spec, mixture, tokens)
        labels = set(clean)
        if spec.noise > 0:
            flips = rng.random(spec.num_labels) < spec.noise
            for lab in np.flatnonzero(flips):
                labels.symmetric_difference_update({int(lab)})
            if not labels:
                labels = set(clean)
        if not labels:
            # guarantee a non-empty training target: fall back to the dominant topic's rule
            dominant = max(spec.global_topic_rules, key=lambda r: mixture[r.topic])
            labels = {dominant.label}
            clean = frozenset(labels)
        docs.append(SyntheticDoc(index, tokens, mixture, planted, frozenset(clean), frozenset(labels)))
    return docs


def _split_key(seed: int, index: int) -> bytes:
    return hashlib.blake2b(f"{seed}/{index}".encode(), digest_size=8).digest()


def split_indices(num_docs: int, seed: int, test_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Train/test split by hash order; exactly ``round(test_fraction*n)`` test documents."""
    n_test = int(round(test_fraction * num_docs))
    ranked = sorted(range(num_docs), key=lambda i: _split_key(seed, i))
    test = sorted(ranked[:n_test])
    train = sorted(ranked[n_test:])
    return train, test


def generate_synthetic(spec: SyntheticSpec) -> tuple[Corpus, Corpus]:
    docs = synthesize_documents(spec)
    train_idx, test_idx = split_indices(spec.num_docs, spec.seed, spec.test_fraction)
    names = [f"label{i}" for i in range(spec.num_labels)]
    for r in spec.global_topic_rules:
        names[r.label] = f"topic{r.topic}"
    for lab, tok in spec.keyword_map:
        names[lab] = f"keyword:{tok}"

    def corpus(idx):
        return Corpus(tuple(Example(docs[i].labels, docs[i].text) for i in idx), spec.num_labels, tuple(names))

    return corpus(train_idx), corpus(test_idx)

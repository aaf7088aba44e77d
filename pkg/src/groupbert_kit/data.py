"""Desk-scale pre-training data: a Markov-chain corpus, sentence-pair packing and file ingestion.

Token ids 0-4 are reserved (``PAD``, ``CLS``, ``SEP``, ``MASK``, ``UNK``);
regular tokens start at :data:`FIRST_REGULAR`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_IDS = (PAD, CLS, SEP, MASK, UNK)
FIRST_REGULAR = 5
IS_NEXT, NOT_NEXT = 0, 1


@dataclass
class Batch:
    tokens: np.ndarray        # [B, L] int64
    segments: np.ndarray      # [B, L] int64
    mask: np.ndarray          # [B, L] bool, true for real tokens
    nsp_labels: np.ndarray    # [B] int64
    index: np.ndarray         # [B] global sequence indices (drive per-sequence masking seeds)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, rows) -> "Batch":
        return Batch(self.tokens[rows], self.segments[rows], self.mask[rows], self.nsp_labels[rows], self.index[rows])


@dataclass
class PretrainingData:
    """Packed ``[CLS] A [SEP] B [SEP]`` examples, right-padded with ``PAD``."""

    tokens: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    nsp_labels: np.ndarray
    vocab_size: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.tokens.shape[1]

    def batch(self, rows) -> Batch:
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(self.tokens[rows], self.segments[rows], self.mask[rows], self.nsp_labels[rows], rows)

    def batches(self, batch_size: int) -> Iterator[Batch]:
        """One pass in storage order."""
        for start in range(0, len(self), batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, len(self))))

    def batch_for_step(self, step: int, batch_size: int) -> Batch:
        """Cyclic, deterministic batch selection for training step ``step``."""
        n = len(self)
        rows = (np.arange(batch_size) + step * batch_size) % n
        return self.batch(rows)

    def subset(self, start: int, stop: int) -> "PretrainingData":
        sl = slice(start, stop)
        return PretrainingData(self.tokens[sl], self.segments[sl], self.mask[sl], self.nsp_labels[sl], self.vocab_size)


class MarkovCorpus:
    """First-order Markov token source with a sparse transition table.

    Each regular token moves to one of ``branching`` successors; successor
    probabilities come from a Dirichlet draw, so most of the mass sits on a
    few neighbours and masked tokens are predictable from local context.
    """

    def __init__(self, vocab_size: int = 101, branching: int = 3, concentration: float = 0.5, seed: int = 0):
        if vocab_size <= FIRST_REGULAR + branching:
            raise ValueError(f"vocab_size must exceed {FIRST_REGULAR + branching}")
        self.vocab_size = vocab_size
        self.seed = seed
        rng = np.random.default_rng([seed, 0x6b1])
        n = vocab_size - FIRST_REGULAR
        self.successors = np.stack([rng.choice(n, size=branching, replace=False) for _ in range(n)]) + FIRST_REGULAR
        self.probs = rng.dirichlet(np.full(branching, concentration), size=n)
        self._cdf = np.cumsum(self.probs, axis=1)

    def stream(self, length: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(length, dtype=np.int64)
        tok = int(rng.integers(FIRST_REGULAR, self.vocab_size))
        u = rng.random(length)
        for i in range(length):
            out[i] = tok
            row = tok - FIRST_REGULAR
            j = min(int(np.searchsorted(self._cdf[row], u[i])), self._cdf.shape[1] - 1)
            tok = int(self.successors[row, j])
        return out

    def streams(self, count: int, length: int, seed: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, seed, 0x57])
        return [self.stream(length, rng) for _ in range(count)]


def pack_pairs(streams: Sequence[np.ndarray], n_sequences: int, sequence_length: int, vocab_size: int,
               seed: int = 0, min_length: int | None = None, nsp_prob: float = 0.5) -> PretrainingData:
    """Cut sentence pairs out of token streams.

    Each example has total (unpadded) length drawn from
    ``[min_length, sequence_length]``; segment A and B split the budget.
    With probability ``nsp_prob`` segment B is taken from a random other
    stream (``NOT_NEXT``), otherwise it continues segment A.
    """
    if sequence_length < 5:
        raise ValueError("sequence_length must leave room for [CLS] A [SEP] B [SEP]")
    streams = [np.asarray(s, dtype=np.int64) for s in streams if len(s) >= 2]
    if not streams:
        raise ValueError("no usable token streams")
    rng = np.random.default_rng([seed, 0xDA7A])
    min_length = sequence_length if min_length is None else max(5, min(min_length, sequence_length))
    tokens = np.full((n_sequences, sequence_length), PAD, dtype=np.int64)
    segments = np.zeros_like(tokens)
    labels = np.zeros(n_sequences, dtype=np.int64)
    for i in range(n_sequences):
        total = int(rng.integers(min_length, sequence_length + 1))
        budget = total - 3
        len_a = int(rng.integers(1, budget)) if budget > 1 else 1
        len_b = max(budget - len_a, 1)
        src = streams[int(rng.integers(len(streams)))]
        need = len_a + len_b
        start = int(rng.integers(0, max(len(src) - need, 0) + 1))
        a = src[start:start + len_a]
        if rng.random() < nsp_prob and len(streams) > 1:
            other = streams[int(rng.integers(len(streams)))]
            ostart = int(rng.integers(0, max(len(other) - len_b, 0) + 1))
            b = other[ostart:ostart + len_b]
            labels[i] = NOT_NEXT
        else:
            b = src[start + len_a:start + need]
            labels[i] = IS_NEXT
        seq = np.concatenate([[CLS], a, [SEP], b, [SEP]])
        tokens[i, :len(seq)] = seq
        segments[i, len(a) + 2:len(seq)] = 1
    mask = tokens != PAD
    return PretrainingData(tokens, segments, mask, labels, vocab_size)


def synthetic_corpus(n_sequences: int = 512, sequence_length: int = 32, vocab_size: int = 101, seed: int = 0,
                     min_length: int | None = None, branching: int = 3, concentration: float = 0.5,
                     corpus_seed: int = 0) -> PretrainingData:
    """Sentence-pair examples drawn from a :class:`MarkovCorpus`.

    ``corpus_seed`` fixes the transition table (the "language"); ``seed``
    fixes which streams and cuts are drawn, so held-out data comes from the
    same language with a different ``seed``.
    """
    corpus = MarkovCorpus(vocab_size, branching, concentration, seed=corpus_seed)
    streams = corpus.streams(max(n_sequences // 4, 8), 8 * sequence_length, seed)
    return pack_pairs(streams, n_sequences, sequence_length, vocab_size, seed, min_length)


# ---------------------------------------------------------------------------
# ingestion


def load_token_file(path: Path | str) -> list[np.ndarray]:
    """One stream per non-empty line of whitespace-separated integer ids."""
    streams = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            streams.append(np.array([int(tok) for tok in line.split()], dtype=np.int64))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected whitespace-separated integers") from None
    return streams


class WhitespaceTokenizer:
    """Lower-cases, splits on non-word characters, maps words to ids by frequency rank."""

    pattern = re.compile(r"\w+|[^\w\s]")

    def __init__(self, vocab: dict[str, int] | None = None):
        self.vocab = dict(vocab or {})

    @classmethod
    def fit(cls, texts: Sequence[str], max_vocab: int = 30522) -> "WhitespaceTokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for word in cls.pattern.findall(text.lower()):
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: max(max_vocab - FIRST_REGULAR, 0)]
        return cls({w: i + FIRST_REGULAR for i, w in enumerate(ranked)})

    @property
    def vocab_size(self) -> int:
        return FIRST_REGULAR + len(self.vocab)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.vocab.get(w, UNK) for w in self.pattern.findall(text.lower())], dtype=np.int64)


def load_corpus(path: Path | str, n_sequences: int, sequence_length: int, seed: int = 0,
                vocab_size: int | None = None, min_length: int | None = None) -> PretrainingData:
    """Pre-tokenised integer file (``.ids``/``.txt`` of ints) or raw text (anything else that fails to parse)."""
    path = Path(path)
    try:
        streams = load_token_file(path)
        vocab = vocab_size or int(max(s.max() for s in streams)) + 1
        if any(s.max() >= vocab for s in streams):
            raise ValueError(f"{path}: token id outside vocabulary of {vocab}")
    except ValueError as exc:
        if "expected whitespace-separated integers" not in str(exc):
            raise
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        tok = WhitespaceTokenizer.fit(lines, vocab_size or 30522)
        streams = [tok.encode(ln) for ln in lines]
        vocab = vocab_size or tok.vocab_size
    return pack_pairs(streams, n_sequences, sequence_length, vocab, seed, min_length)

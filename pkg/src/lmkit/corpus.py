"""Corpus ingestion: vocabularies, character codes and padding-free batch streams."""
from __future__ import annotations

import hashlib
import io
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .numeric.rng import make_rng

UNK, BOS, EOS = "<UNK>", "<S>", "</S>"
RESERVED = (UNK, BOS, EOS)
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2


def read_sentences(path) -> list[list[str]]:
    """UTF-8 text, one sentence per line, whitespace tokenized; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                out.append(toks)
    return out


def write_sentences(path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(s))
            fh.write("\n")


def _tokenize(sentences):
    for s in sentences:
        yield s.split() if isinstance(s, str) else list(s)


class Vocabulary:
    """Dense word <-> id map.  Ids 0, 1, 2 are <UNK>, <S>, </S>."""

    def __init__(self, words: Sequence[str], counts: Sequence[int]):
        words = list(words)
        if tuple(words[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}, got {words[:3]}")
        if len(counts) != len(words):
            raise ValueError("words and counts differ in length")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = words
        self.counts = np.asarray(counts, dtype=np.int64)
        if (self.counts < 0).any():
            raise ValueError("negative count in vocabulary")
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def lookup(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def word(self, idx: int) -> str:
        return self.words[idx]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def encode_sentence(self, tokens: Sequence[str]) -> np.ndarray:
        """<S> w1 .. wn </S> as ids."""
        return np.concatenate([[BOS_ID], self.encode(tokens), [EOS_ID]]).astype(np.int64)

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]

    def unigram(self, floor: float = 1e-9) -> np.ndarray:
        """Training-frequency distribution over ids, floored and renormalized."""
        p = self.counts.astype(float)
        total = p.sum()
        p = p / total if total > 0 else np.full(len(p), 1.0 / len(p))
        p = np.maximum(p, floor)
        return p / p.sum()

    # -- file format: one "word<TAB>count" per line, line number == id --
    def dumps(self) -> str:
        buf = io.StringIO()
        for w, c in zip(self.words, self.counts):
            buf.write(f"{w}\t{int(c)}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        words, counts = [], []
        for lineno, line in enumerate(text.splitlines()):
            if not line:
                continue
            try:
                w, c = line.rsplit("\t", 1)
                counts.append(int(c))
            except ValueError:
                raise ValueError(f"vocabulary line {lineno + 1}: expected word<TAB>count") from None
            words.append(w)
        return cls(words, counts)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def build_vocab(sentences, max_size: int = 100_000, min_count: int = 1) -> Vocabulary:
    """Keep the ``max_size - 3`` most frequent words (ties by string).

    ``<S>`` and ``</S>`` get one count per sentence; ``<UNK>`` counts the
    corpus tokens that fall outside the kept set.
    """
    if max_size < len(RESERVED):
        raise ValueError(f"max_size must be at least {len(RESERVED)}, got {max_size}")
    counts: Counter = Counter()
    n_sent = 0
    for toks in _tokenize(sentences):
        counts.update(toks)
        n_sent += 1
    if n_sent == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [(w, c) for w, c in ranked if c >= min_count][: max_size - len(RESERVED)]
    kept_set = {w for w, _ in kept}
    n_unk = sum(c for w, c in ranked if w not in kept_set)
    words = list(RESERVED) + [w for w, _ in kept]
    cnts = [n_unk, n_sent, n_sent] + [c for _, c in kept]
    return Vocabulary(words, cnts)


class CharCodec:
    """Fixed-width byte codes: 256 byte values plus BOW, EOW and PAD."""

    BOW = 256
    EOW = 257
    PAD = 258
    SIZE = 259

    def __init__(self, max_word_length: int = 16):
        if max_word_length < 3:
            raise ValueError(f"max_word_length must be >= 3, got {max_word_length}")
        self.max_word_length = int(max_word_length)

    def encode(self, word: str) -> np.ndarray:
        return encode_word_chars(word, self)

    def encode_many(self, words: Sequence[str]) -> np.ndarray:
        out = np.full((len(words), self.max_word_length), self.PAD, dtype=np.int64)
        for i, w in enumerate(words):
            out[i] = encode_word_chars(w, self)
        return out

    def decode(self, codes) -> str:
        raw = bytearray()
        for c in list(codes)[1:]:
            if c == self.EOW or c == self.PAD:
                break
            raw.append(int(c))
        return raw.decode("utf-8", errors="replace")

    def __eq__(self, other) -> bool:
        return isinstance(other, CharCodec) and other.max_word_length == self.max_word_length

    def __hash__(self) -> int:
        return hash(("CharCodec", self.max_word_length))

    def __repr__(self) -> str:
        return f"CharCodec(max_word_length={self.max_word_length})"


def encode_word_chars(word: str, codec: CharCodec) -> np.ndarray:
    """[BOW] + utf-8 bytes + [EOW] + [PAD]*, exactly max_word_length codes.

    Words too long for the width keep their first max_word_length - 2 bytes.
    """
    L = codec.max_word_length
    raw = word.encode("utf-8")[: L - 2]
    out = np.full(L, CharCodec.PAD, dtype=np.int64)
    out[0] = CharCodec.BOW
    out[1: 1 + len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    out[1 + len(raw)] = CharCodec.EOW
    return out


class BatchStream:
    """B independent token streams served in (B, T) windows.

    Sentences are dealt round-robin to the streams (after an optional seeded
    shuffle) and concatenated as ``<S> w.. </S> <S> w.. </S>`` with no
    padding.  A stream that runs out wraps to its own beginning; one epoch is
    one pass over the longest stream.
    """

    def __init__(self, sentences: Sequence[np.ndarray], batch_size: int, shuffle_seed: int | None = None):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        order = np.arange(len(sentences))
        if shuffle_seed is not None:
            order = make_rng(shuffle_seed).permutation(len(sentences))
        self.batch_size = batch_size
        self.assignment = [order[b::batch_size] for b in range(batch_size)]
        self.streams = []
        for b, idx in enumerate(self.assignment):
            toks = np.concatenate([np.asarray(sentences[i], dtype=np.int64) for i in idx]) if len(idx) else np.zeros(0, np.int64)
            if len(toks) < 2:
                raise ValueError(f"stream {b} has {len(toks)} tokens; every stream needs at least 2")
            self.streams.append(toks)
        self.lengths = np.array([len(s) for s in self.streams], dtype=np.int64)
        self.cursors = np.zeros(batch_size, dtype=np.int64)

    @property
    def epoch_length(self) -> int:
        """Number of target positions in one pass over the longest stream."""
        return int(self.lengths.max()) - 1

    @property
    def epoch(self) -> float:
        return float(self.cursors.max()) / self.epoch_length

    def next_batch(self, unroll: int):
        if unroll < 1:
            raise ValueError("unroll must be >= 1")
        B = self.batch_size
        inputs = np.empty((B, unroll), dtype=np.int64)
        targets = np.empty((B, unroll), dtype=np.int64)
        for b in range(B):
            pos = (self.cursors[b] + np.arange(unroll + 1)) % self.lengths[b]
            window = self.streams[b][pos]
            inputs[b] = window[:-1]
            targets[b] = window[1:]
        self.cursors += unroll
        return inputs, targets

    def state(self) -> dict:
        return {"cursors": [int(c) for c in self.cursors]}

    def set_state(self, state: dict) -> None:
        self.cursors = np.array(state["cursors"], dtype=np.int64)


def encode_corpus(vocab: Vocabulary, sentences) -> list[np.ndarray]:
    return [vocab.encode_sentence(toks) for toks in _tokenize(sentences)]


def flatten_stream(encoded: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Single-stream (B=1) view: (inputs, targets) over the whole corpus."""
    toks = np.concatenate(encoded)
    return toks[:-1], toks[1:]


def target_mask(targets: np.ndarray) -> np.ndarray:
    """Targets that count toward the loss: everything except <S>."""
    return targets != BOS_ID

"""Perplexity, frequency-bucket comparison and ancestral sampling.

A *scorer* is any callable taking a list of ``<S> w.. </S>`` id sentences and
returning ln p for every counted target (each word and each ``</S>``) in
corpus order.  The classes below wrap the uniform baseline, the KN model and
the neural LM in that protocol.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID
from .numeric import make_rng

Scorer = Callable[[Sequence[np.ndarray]], np.ndarray]


@dataclass
class EvalReport:
    tokens: int
    sum_logprob: float
    bucket_deltas: list = field(default_factory=list)

    @property
    def perplexity(self) -> float:
        return math.exp(-self.sum_logprob / self.tokens)

    def to_kv(self) -> str:
        lines = [f"tokens={self.tokens}", f"sum_logprob={self.sum_logprob!r}", f"perplexity={self.perplexity!r}"]
        lines += [f"bucket_{i}_mean_delta={d!r}" for i, d in enumerate(self.bucket_deltas)]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        return f"tokens {self.tokens}\nsum_logprob {self.sum_logprob:.6f}\nperplexity {self.perplexity:.3f}\n"


def count_targets(sentences: Sequence[np.ndarray]) -> int:
    return int(sum(len(s) - 1 for s in sentences))


def report_from_scores(logp: np.ndarray) -> EvalReport:
    logp = np.asarray(logp, dtype=float)
    if logp.size == 0:
        raise ValueError("no tokens to evaluate")
    bad = np.flatnonzero(~np.isfinite(logp))
    if bad.size:
        raise FloatingPointError(f"non-finite log-probability at token {int(bad[0])}: {logp[bad[0]]}")
    return EvalReport(int(logp.size), float(np.sum(logp)))


def perplexity(scorer: Scorer, sentences: Sequence[np.ndarray]) -> EvalReport:
    """exp(-mean ln p) over every target including each </S>."""
    logp = np.asarray(scorer(sentences), dtype=float)
    expected = count_targets(sentences)
    if logp.shape != (expected,):
        raise ValueError(f"scorer returned {logp.shape} scores for {expected} targets")
    return report_from_scores(logp)


def targets_of(sentences: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(s[1:]) for s in sentences]) if len(sentences) else np.zeros(0, np.int64)


# ----------------------------------------------------------------------------
# scorers
# ----------------------------------------------------------------------------

class UniformScorer:
    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def __call__(self, sentences):
        return np.full(count_targets(sentences), -math.log(self.vocab_size))


class TableScorer:
    """Looks up fixed per-word probabilities; handy for hand-built models."""

    def __init__(self, probs: dict[int, float] | np.ndarray):
        self.probs = probs

    def __call__(self, sentences):
        t = targets_of(sentences)
        if isinstance(self.probs, dict):
            return np.log(np.array([self.probs[int(w)] for w in t], dtype=float))
        return np.log(np.asarray(self.probs, dtype=float)[t])


class KNScorer:
    def __init__(self, model):
        self.model = model

    def __call__(self, sentences):
        return self.model.score_sentences(sentences)


class LMScorer:
    """Scores with a single carried-state stream, as in training.

    ``reset_per_sentence`` zeroes the LSTM state at every ``<S>`` instead.
    """

    def __init__(self, model, reset_per_sentence: bool = False, marginalize: bool = True, chunk: int = 256):
        self.model = model
        self.reset = reset_per_sentence
        self.marginalize = marginalize
        self.chunk = chunk

    def __call__(self, sentences):
        if not len(sentences):
            return np.zeros(0)
        if self.reset:
            return np.concatenate([self._stream([s]) for s in sentences])
        return self._stream(sentences)

    def _stream(self, sentences):
        toks = np.concatenate([np.asarray(s, dtype=np.int64) for s in sentences])
        inputs, targets = toks[:-1], toks[1:]
        logp, _ = self.model.score_stream(inputs, targets, chunk=self.chunk, marginalize=self.marginalize)
        return logp[targets != BOS_ID]


# ----------------------------------------------------------------------------
# frequency buckets
# ----------------------------------------------------------------------------

@dataclass
class BucketTable:
    min_freq: np.ndarray
    max_freq: np.ndarray
    mean_delta: np.ndarray
    size: np.ndarray

    def __len__(self) -> int:
        return len(self.mean_delta)

    def to_text(self) -> str:
        lines = ["bucket_index\tmin_freq\tmax_freq\tmean_delta"]
        for i in range(len(self)):
            lines.append(f"{i}\t{int(self.min_freq[i])}\t{int(self.max_freq[i])}\t{self.mean_delta[i]:.6f}")
        return "\n".join(lines) + "\n"


def bucket_deltas(targets, logp_a, logp_b, train_counts, buckets: int = 25, by: str = "tokens") -> BucketTable:
    """Mean ln p_A - ln p_B per frequency bucket.

    Target occurrences are ordered from the most to the least frequent word
    type in training (ties by word id) and split into ``buckets`` contiguous
    groups.  ``by="tokens"`` makes the groups equal in occurrences (sizes
    differ by at most one); ``by="types"`` makes them equal in distinct types.
    """
    targets = np.asarray(targets, dtype=np.int64)
    delta = np.asarray(logp_a, dtype=float) - np.asarray(logp_b, dtype=float)
    counts = np.asarray(train_counts)
    if len(targets) != len(delta):
        raise ValueError("scores and targets differ in length")
    freq = counts[targets]
    order = np.lexsort((targets, -freq))
    if by == "tokens":
        if len(targets) < buckets:
            raise ValueError(f"{len(targets)} tokens cannot fill {buckets} buckets")
        groups = np.array_split(order, buckets)
    elif by == "types":
        types = np.unique(targets)
        if len(types) < buckets:
            raise ValueError(f"{len(types)} word types cannot fill {buckets} buckets")
        types = types[np.lexsort((types, -counts[types]))]
        bucket_of = np.empty(counts.shape[0], dtype=np.int64)
        for i, g in enumerate(np.array_split(types, buckets)):
            bucket_of[g] = i
        b = bucket_of[targets[order]]
        groups = [order[b == i] for i in range(buckets)]
    else:
        raise ValueError(f"by must be 'tokens' or 'types', got {by!r}")
    return BucketTable(
        np.array([freq[g].min() for g in groups]),
        np.array([freq[g].max() for g in groups]),
        np.array([delta[g].mean() for g in groups]),
        np.array([len(g) for g in groups]),
    )


def bucket_compare(scorer_a: Scorer, scorer_b: Scorer, sentences, train_counts, buckets: int = 25, by: str = "tokens") -> BucketTable:
    return bucket_deltas(targets_of(sentences), scorer_a(sentences), scorer_b(sentences), train_counts, buckets, by)


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def sample_sentences(model, count: int, max_len: int, temperature: float = 1.0, seed: int = 0) -> list[list[int]]:
    """Ancestral samples from ``<S>`` until ``</S>`` or ``max_len`` words.

    ``model`` needs ``zero_state(batch)`` and ``step_logprobs(token, state)``
    returning a normalized log-distribution over ids.  ``temperature=0`` is
    greedy decoding.  ``<S>`` is never emitted.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    rng = make_rng(seed)
    step = model.step_logprobs
    if hasattr(model, "output_table"):
        table = model.output_table()  # precomputed output vectors, reused for every step
        step = lambda tok, st: model.step_logprobs(tok, st, table=table)  # noqa: E731
    out = []
    for _ in range(count):
        state = model.zero_state(1)
        tok, words = BOS_ID, []
        while len(words) < max_len:
            lp, state = step(tok, state)
            lp = np.array(lp, dtype=float)
            lp[BOS_ID] = -np.inf
            if temperature == 0:
                tok = int(np.argmax(lp))
            else:
                z = lp / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                tok = int(rng.choice(len(p), p=p))
            if tok == EOS_ID:
                break
            words.append(tok)
        out.append(words)
    return out


__all__ = [
    "EvalReport",
    "perplexity",
    "report_from_scores",
    "UniformScorer",
    "TableScorer",
    "KNScorer",
    "LMScorer",
    "BucketTable",
    "bucket_deltas",
    "bucket_compare",
    "sample_sentences",
    "targets_of",
]

"""Interpolated Kneser-Ney n-gram language model.

One absolute discount per order, ``D = n1 / (n1 + 2 n2)``.  The highest order
uses raw counts; lower orders use continuation counts (the number of distinct
one-token left extensions).  The unigram level interpolates with a uniform
distribution over the vocabulary so every word gets non-zero mass.

Sentences are given as id arrays ``<S> w.. </S>``.  Each is left-padded so
that every target has ``order - 1`` tokens of context; n-grams never span two
sentences.  N-gram tables are sorted arrays of fixed-width byte keys searched
with ``np.searchsorted``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID

FALLBACK_DISCOUNT = 0.5


def _keys(rows: np.ndarray) -> np.ndarray:
    """Fixed-width byte keys whose sort order is the lexicographic order of the id rows."""
    rows = np.ascontiguousarray(rows, dtype=">i4")
    n = rows.shape[1]
    if n == 0:
        return np.zeros(len(rows), dtype="V1")
    return rows.view(f"V{4 * n}").reshape(-1)


def _lookup(table_keys: np.ndarray, values: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """values[i] where table_keys[i] == query, else 0."""
    if len(table_keys) == 0:
        return np.zeros(len(query_keys), dtype=values.dtype)
    pos = np.searchsorted(table_keys, query_keys)
    pos = np.minimum(pos, len(table_keys) - 1)
    hit = table_keys[pos] == query_keys
    return np.where(hit, values[pos], 0)


@dataclass
class _Order:
    """Count tables for one order n (n-grams of length n)."""

    n: int
    discount: float
    gram_keys: np.ndarray  # sorted keys of (context, word)
    gram_counts: np.ndarray
    ctx_keys: np.ndarray  # sorted keys of contexts (length n - 1)
    ctx_totals: np.ndarray  # sum of counts over words
    ctx_types: np.ndarray  # number of words with a non-zero count


def _discount(counts: np.ndarray) -> float:
    n1 = int(np.sum(counts == 1))
    n2 = int(np.sum(counts == 2))
    if n1 == 0:
        return FALLBACK_DISCOUNT
    return n1 / (n1 + 2 * n2)


def _build_order(n: int, grams: np.ndarray, counts: np.ndarray) -> _Order:
    keys = _keys(grams)
    order = np.argsort(keys, kind="stable")
    keys, counts, grams = keys[order], counts[order], grams[order]
    ctx = _keys(grams[:, :-1])
    # contexts are contiguous because rows are sorted lexicographically
    starts = np.flatnonzero(np.r_[True, ctx[1:] != ctx[:-1]]) if len(ctx) else np.zeros(0, np.int64)
    totals = np.add.reduceat(counts, starts) if len(ctx) else np.zeros(0, np.int64)
    types = np.diff(np.r_[starts, len(ctx)])
    return _Order(n, _discount(counts), keys, counts.astype(np.int64), ctx[starts], totals.astype(np.int64), types.astype(np.int64))


def _unique_rows(rows: np.ndarray):
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq, counts


@dataclass
class KNModel:
    order: int
    vocab_size: int
    orders: list = field(default_factory=list)  # orders[n - 1] is the _Order for n-grams of length n

    @property
    def discounts(self) -> list[float]:
        return [o.discount for o in self.orders]

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"word id out of range for vocabulary of {self.vocab_size}")

    def logprob_batch(self, contexts: np.ndarray, words: np.ndarray) -> np.ndarray:
        """ln p(word | context) for rows of a (N, c) context matrix, c <= order - 1.

        Only the last ``order - 1`` columns of the context are used; a context
        shorter than that queries the correspondingly lower order.
        """
        contexts = np.asarray(contexts, dtype=np.int64)
        words = np.asarray(words, dtype=np.int64).reshape(-1)
        if contexts.ndim == 1:
            contexts = contexts.reshape(len(words), -1) if len(words) else contexts.reshape(0, 0)
        self._check_ids(words)
        self._check_ids(contexts)
        c = min(contexts.shape[1], self.order - 1)
        contexts = contexts[:, contexts.shape[1] - c:]
        uni = self.orders[0]
        cnt = _lookup(uni.gram_keys, uni.gram_counts, _keys(words[:, None])).astype(float)
        D = uni.discount
        total = float(uni.ctx_totals[0])
        types = float(uni.ctx_types[0])
        p = np.maximum(cnt - D, 0.0) / total + D * types / total / self.vocab_size
        for n in range(2, c + 2):
            o = self.orders[n - 1]
            ctx = contexts[:, c - (n - 1):]
            ck = _keys(ctx)
            tot = _lookup(o.ctx_keys, o.ctx_totals, ck).astype(float)
            typ = _lookup(o.ctx_keys, o.ctx_types, ck).astype(float)
            g = _lookup(o.gram_keys, o.gram_counts, _keys(np.concatenate([ctx, words[:, None]], axis=1))).astype(float)
            seen = tot > 0
            safe = np.where(seen, tot, 1.0)
            mixed = np.maximum(g - o.discount, 0.0) / safe + o.discount * typ / safe * p
            p = np.where(seen, mixed, p)
        return np.log(p)

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        """p(. | context) over the whole vocabulary."""
        ctx = np.asarray(context, dtype=np.int64).reshape(1, -1)
        V = self.vocab_size
        return np.exp(self.logprob_batch(np.repeat(ctx, V, axis=0), np.arange(V)))

    def score_sentences(self, sentences: Sequence[np.ndarray]) -> np.ndarray:
        """ln p of every target (all tokens after the leading <S>) in corpus order."""
        ctxs, words = _contexts(sentences, self.order)
        if len(words) == 0:
            return np.zeros(0)
        return self.logprob_batch(ctxs, words)

    def score_stream(self, inputs, targets) -> np.ndarray:
        """Scores aligned with a flat ``<S> .. </S> <S> ..`` stream; <S> targets get 0."""
        inputs = np.asarray(inputs).reshape(-1)
        targets = np.asarray(targets).reshape(-1)
        toks = np.r_[inputs[:1], targets]
        if toks.size == 0 or toks[0] != BOS_ID:
            raise ValueError("stream must start with <S>")
        out = np.zeros(len(targets))
        out[targets != BOS_ID] = self.score_sentences(sentence_ids(toks))
        return out

    def num_ngrams(self) -> list[int]:
        return [len(o.gram_keys) for o in self.orders]


def _padded(sentences: Sequence[np.ndarray], order: int):
    pad = np.full(max(order - 2, 0), BOS_ID, dtype=np.int64)
    for s in sentences:
        s = np.asarray(s, dtype=np.int64)
        if len(s) == 0 or s[0] != BOS_ID:
            raise ValueError("each sentence must start with <S>")
        yield np.concatenate([pad, s]) if order >= 2 else s


def _contexts(sentences: Sequence[np.ndarray], order: int):
    """(N, order-1) contexts and N target words for all targets of the sentences."""
    rows = []
    for s in _padded(sentences, order):
        if len(s) < order or (order == 1 and len(s) < 2):
            continue
        if order == 1:
            rows.append(s[1:, None])
            continue
        win = np.lib.stride_tricks.sliding_window_view(s, order)
        rows.append(win)
    if not rows:
        return np.zeros((0, max(order - 1, 0)), np.int64), np.zeros(0, np.int64)
    grams = np.concatenate(rows, axis=0)
    return grams[:, :-1], grams[:, -1]


def train_kn(sentences: Sequence[np.ndarray], vocab_size: int, order: int = 5) -> KNModel:
    """Count n-grams of ``<S> .. </S>`` id sentences and build the smoothed model."""
    if order < 1:
        raise ValueError("order must be >= 1")
    ctxs, words = _contexts(sentences, order)
    if len(words) == 0:
        raise ValueError("empty corpus: no tokens to count")
    if max(int(words.max()), int(ctxs.max()) if ctxs.size else 0) >= vocab_size:
        raise IndexError(f"word id out of range for vocabulary of {vocab_size}")
    top = np.concatenate([ctxs, words[:, None]], axis=1)
    grams, counts = _unique_rows(top)
    built = [_build_order(order, grams, counts)]
    for n in range(order - 1, 0, -1):
        # continuation count of a suffix = number of distinct left extensions
        grams, counts = _unique_rows(grams[:, 1:])
        built.append(_build_order(n, grams, counts))
    return KNModel(order, vocab_size, built[::-1])


def kn_logprob(model: KNModel, context: Sequence[int], word: int) -> float:
    ctx = np.asarray(context, dtype=np.int64).reshape(1, -1)
    return float(model.logprob_batch(ctx, np.array([word]))[0])


def sentence_ids(stream: np.ndarray) -> list[np.ndarray]:
    """Split a flat ``<S> .. </S> <S> ..`` id stream into sentences."""
    stream = np.asarray(stream)
    cuts = np.flatnonzero(stream == BOS_ID)
    return [stream[a:b] for a, b in zip(cuts, list(cuts[1:]) + [len(stream)])]


def export_arpa(model: KNModel, words: Sequence[str], fh) -> None:
    """Write the model in ARPA text form.

    Each listed n-gram carries its interpolated log10 probability and, for
    n-grams that occur as contexts, the log10 interpolation weight given to
    the next lower order.  The zero-order uniform term is folded into the
    unigram probabilities, so unigrams cover the whole vocabulary.
    """
    V = model.vocab_size
    if len(words) != V:
        raise ValueError("word list does not match the model's vocabulary size")
    grams_per_order = [np.arange(V)[:, None]]
    for o in model.orders[1:]:
        grams_per_order.append(o.gram_keys.view(">i4").reshape(len(o.gram_keys), o.n).astype(np.int64))
    fh.write("\\data\\\n")
    for n, g in enumerate(grams_per_order, start=1):
        fh.write(f"ngram {n}={len(g)}\n")
    for n, g in enumerate(grams_per_order, start=1):
        fh.write(f"\n\\{n}-grams:\n")
        lp = model.logprob_batch(g[:, :-1], g[:, -1]) / math.log(10)
        if n < model.order:
            nxt = model.orders[n]
            ck = _keys(g)
            tot = _lookup(nxt.ctx_keys, nxt.ctx_totals, ck).astype(float)
            typ = _lookup(nxt.ctx_keys, nxt.ctx_types, ck).astype(float)
            with np.errstate(divide="ignore"):
                bow = np.where(tot > 0, np.log10(nxt.discount * typ / np.where(tot > 0, tot, 1.0)), np.nan)
        else:
            bow = np.full(len(g), np.nan)
        for row, p, b in zip(g, lp, bow):
            text = " ".join(words[i] for i in row)
            fh.write(f"{p:.6f}\t{text}" + ("" if np.isnan(b) else f"\t{b:.6f}") + "\n")
    fh.write("\n\\end\\\n")


# serialization helpers used by the checkpoint module
def kn_to_arrays(model: KNModel) -> dict[str, np.ndarray]:
    out = {"meta": np.array([model.order, model.vocab_size], dtype=np.int64)}
    for o in model.orders:
        g = o.gram_keys.view(">i4").reshape(len(o.gram_keys), o.n).astype(np.int64)
        out[f"order{o.n}.grams"] = g
        out[f"order{o.n}.counts"] = o.gram_counts
        out[f"order{o.n}.discount"] = np.array([o.discount])
    return out


def kn_from_arrays(arrays: dict[str, np.ndarray]) -> KNModel:
    order, V = (int(x) for x in arrays["meta"])
    built = []
    for n in range(1, order + 1):
        o = _build_order(n, arrays[f"order{n}.grams"], arrays[f"order{n}.counts"])
        o.discount = float(arrays[f"order{n}.discount"][0])
        built.append(o)
    return KNModel(order, V, built)


__all__ = ["KNModel", "train_kn", "kn_logprob", "sentence_ids", "export_arpa", "EOS_ID"]

import io
import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmkit.ngram import export_arpa, kn_logprob, sentence_ids, train_kn

UNK, S, E, A, B = 0, 1, 2, 3, 4


def sent(*ids):
    return np.array([S, *ids, E])


def p(model, ctx, w):
    return math.exp(kn_logprob(model, ctx, w))


# -- hand-computed values on three micro corpora ------------------------------

def test_bigram_hand_values():
    m = train_kn([sent(A, B, A, B)], 5, order=2)
    assert m.discounts == pytest.approx([0.5, 0.6], abs=1e-12)
    cases = [([], A, 0.45), ([], B, 0.2), ([], E, 0.2), ([], UNK, 0.075), ([], S, 0.075),
             ([A], B, 0.76), ([A], A, 0.135), ([B], E, 0.32), ([B], A, 0.47)]
    for ctx, w, want in cases:
        assert abs(p(m, ctx, w) - want) < 1e-9, (ctx, w)


def test_trigram_hand_values():
    m = train_kn([sent(A, B), sent(A, A)], 5, order=3)
    assert m.discounts == pytest.approx([0.2, 1.0, 2 / 3], abs=1e-12)
    cases = [([], A, 0.384), ([], E, 0.384), ([], B, 0.184), ([], UNK, 0.024), ([], S, 0.024),
             ([S, A], B, 1 / 6 + (2 / 3) * 0.184), ([S, S], A, 2 / 3 + 0.128), ([A, B], E, 1 / 3 + 0.256)]
    for ctx, w, want in cases:
        assert abs(p(m, ctx, w) - want) < 1e-9, (ctx, w)


def test_unigram_fallback_discount_hand_values():
    m = train_kn([sent(A, A), sent(A, A)], 4, order=1)
    assert m.discounts == [0.5]
    for w, want in [(A, 0.625), (E, 0.875 / 3), (UNK, 0.125 / 3), (S, 0.125 / 3)]:
        assert abs(p(m, [], w) - want) < 1e-9


# -- brute-force reference --------------------------------------------------

def reference_kn(sentences, V, order):
    """Dictionary-based interpolated KN with continuation counts for lower orders."""
    top = Counter()
    for s in sentences:
        padded = [S] * max(order - 2, 0) + list(s)
        start = 1 if order == 1 else 0
        for i in range(start, len(padded) - order + 1):
            top[tuple(padded[i:i + order])] += 1
    counts = {order: top}
    for n in range(order - 1, 0, -1):
        cont = Counter()
        for g in counts[n + 1]:
            cont[g[1:]] += 1
        counts[n] = cont

    def disc(c):
        n1 = sum(1 for v in c.values() if v == 1)
        n2 = sum(1 for v in c.values() if v == 2)
        return 0.5 if n1 == 0 else n1 / (n1 + 2 * n2)

    D = {n: disc(c) for n, c in counts.items()}
    tot, typ = defaultdict(Counter), defaultdict(Counter)
    for n, c in counts.items():
        for g, v in c.items():
            tot[n][g[:-1]] += v
            typ[n][g[:-1]] += 1

    def prob(ctx, w):
        ctx = tuple(ctx)[-(order - 1):] if order > 1 else ()
        pr = max(counts[1][(w,)] - D[1], 0) / tot[1][()] + D[1] * typ[1][()] / tot[1][()] / V
        for n in range(2, len(ctx) + 2):
            c = ctx[len(ctx) - (n - 1):]
            t = tot[n][c]
            if t:
                pr = max(counts[n][c + (w,)] - D[n], 0) / t + D[n] * typ[n][c] / t * pr
        return pr

    return prob


corpora = st.lists(st.lists(st.integers(3, 7), min_size=0, max_size=6), min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(corpora, st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matches_reference_and_normalizes(raw, order, seed):
    V = 8
    sentences = [sent(*s) for s in raw]
    m = train_kn(sentences, V, order)
    ref = reference_kn(sentences, V, order)
    rng = np.random.default_rng(seed)
    contexts = [[], list(rng.integers(0, V, size=order - 1))]
    if order > 1:
        contexts.append([S] * (order - 1))
        contexts.append(list(sentences[0][-(order - 1):]))
    for ctx in contexts:
        dist = m.distribution(ctx)
        assert abs(dist.sum() - 1.0) < 1e-12
        assert np.all(dist > 0)
        for w in range(V):
            assert abs(dist[w] - ref(ctx, w)) < 1e-12


def test_score_sentences_and_stream_agree():
    sents = [sent(A, B, A), sent(B), sent(A, A, B, B)]
    m = train_kn(sents, 5, order=3)
    scores = m.score_sentences(sents)
    assert len(scores) == sum(len(s) - 1 for s in sents)
    stream = np.concatenate(sents)
    flat = m.score_stream(stream[:-1], stream[1:])
    np.testing.assert_allclose(flat[stream[1:] != S], scores)
    assert not flat[stream[1:] == S].any()
    assert [len(s) for s in sentence_ids(stream)] == [5, 3, 6]


def test_errors():
    with pytest.raises(ValueError, match="empty"):
        train_kn([np.array([S])], 5, order=2)
    with pytest.raises(ValueError, match="<S>"):
        train_kn([np.array([A, E])], 5)
    with pytest.raises(IndexError):
        train_kn([sent(9)], 5)
    with pytest.raises(ValueError):
        train_kn([sent(A)], 5, order=0)
    m = train_kn([sent(A)], 5, order=2)
    with pytest.raises(IndexError):
        kn_logprob(m, [A], 7)


def test_arpa_export_round_trips_probabilities():
    m = train_kn([sent(A, B, A, B)], 5, order=2)
    words = ["<UNK>", "<S>", "</S>", "a", "b"]
    buf = io.StringIO()
    export_arpa(m, words, buf)
    text = buf.getvalue()
    assert text.startswith("\\data\\\nngram 1=5\nngram 2=4\n")
    assert text.rstrip().endswith("\\end\\")
    rows = {}
    for line in text.splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            rows[parts[1]] = [float(x) for x in [parts[0]] + parts[2:]]
    assert 10 ** rows["a b"][0] == pytest.approx(0.76, rel=1e-5)
    assert 10 ** rows["a"][0] == pytest.approx(0.45, rel=1e-5)
    # backoff weight of context a: D * types / total = 0.6 * 1 / 2
    assert 10 ** rows["a"][1] == pytest.approx(0.3, rel=1e-5)
    with pytest.raises(ValueError):
        export_arpa(m, words[:3], io.StringIO())

import numpy as np
import pytest

from lmkit.evaluation import (
    KNScorer,
    LMScorer,
    TableScorer,
    UniformScorer,
    bucket_deltas,
    perplexity,
    report_from_scores,
    sample_sentences,
)
from lmkit.model import LanguageModel, resolve_arch
from lmkit.ngram import train_kn

S, E = 1, 2


def test_uniform_scorer_gives_vocab_size():
    sents = [np.array([S, 5, 9, 3, E]), np.array([S, E])]
    for V in (10, 100, 793):
        assert perplexity(UniformScorer(V), sents).perplexity == pytest.approx(V, rel=1e-12)


def test_perfect_model_gives_one():
    sents = [np.array([S, 3, 4, E])]
    rep = perplexity(TableScorer({3: 1.0, 4: 1.0, E: 1.0}), sents)
    assert rep.perplexity == 1.0 and rep.tokens == 3


def test_hand_corpus_gives_four():
    # probabilities 1/2, 1/8, 1/2, 1/8: geometric mean 1/4
    probs = np.zeros(6)
    probs[[3, 4, E]] = [0.5, 0.125, 0.125]
    rep = perplexity(TableScorer(probs), [np.array([S, 3, 4, 3, E])])
    assert rep.perplexity == pytest.approx(4.0, rel=1e-12)
    assert "perplexity 4.000" in rep.to_text()


def test_report_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        report_from_scores([])
    with pytest.raises(FloatingPointError, match="token 1"):
        report_from_scores([0.0, -np.inf])
    with pytest.raises(ValueError, match="scores"):
        perplexity(lambda s: np.zeros(1), [np.array([S, 3, E])])


def test_kn_scorer_counts_every_target():
    sents = [np.array([S, 3, 4, E]), np.array([S, 4, E])]
    m = train_kn(sents, 5, order=3)
    rep = perplexity(KNScorer(m), sents)
    assert rep.tokens == 5 and 1.0 < rep.perplexity < 5.0


def _tiny_lm(V=12, **kw):
    arch = resolve_arch(embed_dim=4, hidden_dim=6, proj_dim=4, dropout=0.0, **kw)
    return LanguageModel(arch, ["<UNK>", "<S>", "</S>"] + [f"w{i}" for i in range(V - 3)])


def test_lm_scorer_is_normalized_and_reset_differs():
    lm = _tiny_lm()
    sents = [np.array([S, 3, 4, E]), np.array([S, 5, E])]
    carried = LMScorer(lm)(sents)
    reset = LMScorer(lm, reset_per_sentence=True)(sents)
    assert carried.shape == reset.shape == (5,)
    np.testing.assert_allclose(carried[:3], reset[:3], rtol=1e-12)
    assert not np.allclose(carried[3:], reset[3:])
    state = lm.zero_state(1)
    lp, _ = lm.step_logprobs(S, state)
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)


def test_bucket_table_layout_and_sizes():
    rng = np.random.default_rng(0)
    counts = np.arange(60)[::-1] + 1
    targets = rng.integers(0, 60, size=503)
    a, b = rng.normal(size=503), rng.normal(size=503)
    t = bucket_deltas(targets, a, b, counts, buckets=25)
    assert len(t) == 25 and t.size.sum() == 503 and t.size.max() - t.size.min() <= 1
    assert np.all(t.max_freq[1:] <= t.min_freq[:-1])
    text = t.to_text().splitlines()
    assert text[0] == "bucket_index\tmin_freq\tmax_freq\tmean_delta" and len(text) == 26
    assert np.average(t.mean_delta, weights=t.size) == pytest.approx((a - b).mean())
    ty = bucket_deltas(targets, a, b, counts, buckets=10, by="types")
    assert len(ty) == 10
    with pytest.raises(ValueError):
        bucket_deltas(targets[:5], a[:5], b[:5], counts, buckets=25)
    with pytest.raises(ValueError):
        bucket_deltas(targets, a, b, counts, by="bytes")


def test_sampling_is_seeded_and_never_emits_bos():
    lm = _tiny_lm()
    a = sample_sentences(lm, 5, 8, seed=3)
    assert a == sample_sentences(lm, 5, 8, seed=3)
    assert all(len(s) <= 8 and S not in s and E not in s for s in a)
    g = sample_sentences(lm, 2, 6, temperature=0)
    assert g[0] == g[1]
    with pytest.raises(ValueError):
        sample_sentences(lm, 1, 3, temperature=-1)

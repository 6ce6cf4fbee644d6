import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmkit.numeric import log_softmax, make_rng
from lmkit.softmax_heads import (
    CharLSTMHead,
    CNNSoftmaxHead,
    FullSoftmaxHead,
    char_lstm_logprob,
    cnn_softmax_logit,
    full_ce,
    is_loss,
    marginalize_in_vocab,
    nce_loss,
    sampled_is,
    sampled_nce,
)

WORDS = ["<UNK>", "<S>", "</S>", "the", "then", "there", "cat", "cats", "c"]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1), st.floats(0.1, 20))
def test_is_with_all_other_words_and_uniform_proposal_is_full_ce(V, seed, scale):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=scale, size=V)
    t = int(rng.integers(V))
    others = np.array([w for w in range(V) if w != t])
    pn = np.full(V, 1.0 / V)
    exact = -log_softmax(z)[t]
    assert abs(is_loss(lambda ids, h: z[ids], None, t, others, pn) - exact) < 1e-10
    batched, _, _ = sampled_is(z[[t]], z[others][None, :], np.log(pn[t]), np.log(pn[others])[None, :])
    assert abs(batched - exact) < 1e-10


def test_nce_hand_formula():
    z = np.array([0.3, -1.2, 2.0])
    pn = np.array([0.5, 0.25, 0.25])
    samples = [1, 2]
    k = 2

    def sig(a):
        return 1 / (1 + np.exp(-a))

    expected = -np.log(sig(z[0] - np.log(k * 0.5))) - np.log(1 - sig(z[1] - np.log(k * 0.25))) - np.log(1 - sig(z[2] - np.log(k * 0.25)))
    assert nce_loss(lambda ids, h: z[ids], None, 0, samples, pn) == pytest.approx(expected, rel=1e-12)
    val, _, _ = sampled_nce(z[[0]], z[[1, 2]][None, :], np.log(k * 0.5), np.log(k * pn[[1, 2]])[None, :])
    assert val == pytest.approx(expected, rel=1e-12)


def test_zero_proposal_mass_rejected():
    with pytest.raises(ValueError, match="proposal"):
        is_loss(lambda ids, h: np.zeros(len(ids)), None, 0, [1], np.array([0.5, 0.0, 0.5]))


def test_full_ce_gradient_sums_to_zero(rng):
    Z = rng.normal(size=(4, 6))
    _, dZ = full_ce(Z, np.array([0, 1, 5, 2]))
    np.testing.assert_allclose(dZ.sum(axis=1), 0.0, atol=1e-15)


def test_weights_zero_rows_have_no_gradient(rng):
    head = FullSoftmaxHead(len(WORDS), 4, make_rng(0))
    H = rng.normal(size=(3, 4))
    _, dH = head.loss(H, np.array([3, 4, 5]), "full", weights=np.array([1.0, 0.0, 1.0]))
    assert not dH[1].any()
    with pytest.raises(ValueError):
        head.loss(H, np.array([3, 4, 5]), "full", weights=np.zeros(3))
    with pytest.raises(ValueError, match="loss kind"):
        head.loss(H, np.array([3, 4, 5]), "hinge")


def test_cnn_softmax_param_count_and_logit():
    head = CNNSoftmaxHead(WORDS, 6, corr_dim=3, max_word_length=8, rng=make_rng(0), char_dim=4, widths=(1, 2), features=(3, 5))
    nf = 8
    cnn = 259 * 4 + (1 * 4 * 3 + 3) + (2 * 4 * 5 + 5) + 2 * 2 * (nf * nf + nf) + nf * 6
    assert head.cnn.num_parameters() == cnn
    assert head.num_parameters() == cnn + len(WORDS) * 3 + 6 * 3
    h = np.random.default_rng(1).normal(size=6)
    Z = head.logits(h[None, :])[0]
    for w in range(len(WORDS)):
        assert cnn_softmax_logit(head, h, w) == pytest.approx(Z[w], rel=1e-12)
    no_corr = CNNSoftmaxHead(WORDS, 6, corr_dim=0, max_word_length=8, rng=make_rng(0), char_dim=4, widths=(1, 2), features=(3, 5))
    assert no_corr.num_parameters() == cnn


def _char_head():
    return CharLSTMHead(5, char_dim=4, hidden_dim=6, proj_dim=4, max_word_length=8, rng=make_rng(2))


def test_char_head_trie_matches_direct_scoring(rng):
    head = _char_head()
    H = rng.normal(size=(3, 5))
    codes = head.encode(WORDS)
    trie = head.vocab_logprobs(H, codes)
    for i in range(3):
        for j, w in enumerate(WORDS):
            assert trie[i, j] == pytest.approx(char_lstm_logprob(head, H[i], w), rel=1e-10, abs=1e-12)


def test_char_head_loss_is_mean_negative_logprob(rng):
    head = _char_head()
    H = rng.normal(size=(3, 5))
    codes = head.encode(["cat", "the", "c"])
    lp, _ = head.word_logprob(H, codes)
    loss, dH = head.loss(H, codes)
    assert loss == pytest.approx(-lp.mean(), rel=1e-12)
    assert dH.shape == H.shape


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_marginalization_never_lowers_in_vocab_probability(seed):
    head = _char_head()
    h = np.random.default_rng(seed).normal(size=5)
    codes = head.encode(WORDS)
    raw = head.vocab_logprobs(h[None, :], codes)[0]
    marg = marginalize_in_vocab(head, h, codes)
    assert np.all(marg >= raw)
    assert np.exp(marg).sum() == pytest.approx(1.0, abs=1e-12)

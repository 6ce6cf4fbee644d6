"""Finite-difference checks of every trainable component at tiny sizes.

Each check builds a component with dims <= 8, redraws its parameters from a
normal distribution (so no gradient is vanishingly small and max-pool ties
are unlikely), and compares analytic and central-difference gradients of a
random linear functional of its output.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .embeddings import CharCNNEmbedder, Highway
from .model import LanguageModel
from .numeric import Parameter, finite_diff_check, make_rng
from .recurrent import LSTMPCell, LSTMStack, LSTMState
from .softmax_heads import CharLSTMHead, CNNSoftmaxHead, FullSoftmaxHead

TOLERANCE = 1e-4
WORDS = ["<UNK>", "<S>", "</S>", "cat", "cats", "dog", "at", "a"]


def _redraw(params, rng, scale=0.5):
    for p in params:
        p.value[...] = rng.normal(0.0, scale, size=p.shape)


def check_lstm_cell(seed: int = 0) -> float:
    rng = make_rng(seed)
    cell = LSTMPCell(5, 6, 4, rng, name="cell")
    _redraw(cell.parameters(), rng)
    X = rng.normal(size=(3, 2, 5))
    R = rng.normal(size=(3, 2, 4))
    Rc = rng.normal(size=(2, 6))

    def loss():
        st = cell.zero_state(2)
        caches, total = [], 0.0
        for t in range(3):
            h, st, c = cell.forward(X[t], st)
            caches.append(c)
            total += float((R[t] * h).sum())
        total += float((Rc * st.c).sum())
        dh_rec, dc_rec = np.zeros((2, 4)), Rc.copy()
        for t in range(2, -1, -1):
            _, dh_rec, dc_rec = cell.backward(caches[t], R[t] + dh_rec, dc_rec)
        return total

    return finite_diff_check(loss, cell.parameters())


def check_lstm_stack(seed: int = 0) -> float:
    rng = make_rng(seed)
    stack = LSTMStack([LSTMPCell(4, 6, 5, rng, name="l0"), LSTMPCell(5, 6, 4, rng, name="l1")], dropout=0.25)
    _redraw(stack.parameters(), rng)
    X = Parameter(rng.normal(size=(2, 3, 4)), "x")
    R = rng.normal(size=(2, 3, 4))

    def loss():
        H, _, caches = stack.forward_sequence(X.value, stack.zero_state(2), training=True, rng=make_rng(seed + 1))
        X.grad += stack.backward_sequence(caches, R)
        return float((R * H).sum())

    return finite_diff_check(loss, stack.parameters() + [X])


def check_highway(seed: int = 0) -> float:
    rng = make_rng(seed)
    hw = Highway(4, rng)
    _redraw(hw.parameters(), rng)
    X = Parameter(rng.normal(size=(3, 4)), "x")
    R = rng.normal(size=(3, 4))

    def loss():
        y, c = hw.forward(X.value)
        X.grad += hw.backward(c, R)
        return float((R * y).sum())

    return finite_diff_check(loss, hw.parameters() + [X])


def _tiny_cnn(rng, out_dim=5, name="cnn", out_bias=True):
    return CharCNNEmbedder(out_dim, max_word_length=8, char_dim=4, widths=(1, 2, 3), features=(2, 3, 3), n_highway=2,
                           rng=rng, name=name, out_bias=out_bias)


def check_charcnn(seed: int = 0) -> float:
    rng = make_rng(seed)
    cnn = _tiny_cnn(rng)
    _redraw(cnn.parameters(), rng)
    codes = cnn.codec.encode_many(WORDS[3:])
    R = rng.normal(size=(len(codes), 5))

    def loss():
        out, cache = cnn.forward(codes)
        cnn.backward(cache, R)
        return float((R * out).sum())

    return finite_diff_check(loss, cnn.parameters())


def _head_check(head, kind: str, rng, dim: int) -> float:
    V = len(WORDS)
    H = Parameter(rng.normal(size=(4, dim)), "h")
    targets = np.array([3, 5, 2, 7])
    samples = rng.integers(0, V, size=6)
    pn = np.arange(1, V + 1) / np.arange(1, V + 1).sum()
    weights = np.array([1.0, 1.0, 0.0, 1.0])

    def loss():
        val, dH = head.loss(H.value, targets, kind, samples, pn, weights)
        H.grad += dH
        return val

    return finite_diff_check(loss, head.parameters() + [H])


def check_full_softmax(seed: int = 0) -> float:
    rng = make_rng(seed)
    head = FullSoftmaxHead(len(WORDS), 5, rng, bias=True)
    _redraw(head.parameters(), rng)
    return _head_check(head, "full", rng, 5)


def check_is_loss(seed: int = 0) -> float:
    rng = make_rng(seed)
    head = FullSoftmaxHead(len(WORDS), 5, rng, bias=True)
    _redraw(head.parameters(), rng)
    return _head_check(head, "is", rng, 5)


def check_nce_loss(seed: int = 0) -> float:
    rng = make_rng(seed)
    head = FullSoftmaxHead(len(WORDS), 5, rng, bias=True)
    _redraw(head.parameters(), rng)
    return _head_check(head, "nce", rng, 5)


def check_cnn_softmax(seed: int = 0) -> float:
    rng = make_rng(seed)
    head = CNNSoftmaxHead(WORDS, 5, corr_dim=3, max_word_length=8, rng=rng, char_dim=4, widths=(1, 2, 3), features=(2, 3, 3))
    _redraw(head.parameters(), rng)
    return max(_head_check(head, "is", rng, 5), _head_check(head, "full", rng, 5))


def check_char_head(seed: int = 0) -> float:
    rng = make_rng(seed)
    head = CharLSTMHead(5, char_dim=4, hidden_dim=6, proj_dim=4, max_word_length=8, rng=rng)
    _redraw(head.parameters(), rng)
    codes = head.encode(WORDS[3:7])
    H = Parameter(rng.normal(size=(4, 5)), "h")
    weights = np.array([1.0, 0.5, 1.0, 2.0])

    def loss():
        val, dH = head.loss(H.value, codes, weights)
        H.grad += dH
        return val

    return finite_diff_check(loss, head.parameters() + [H])


def check_language_model(seed: int = 0, **arch) -> float:
    rng = make_rng(seed)
    base = dict(embed_dim=4, hidden_dim=6, proj_dim=4, layers=2, dropout=0.0, loss="is", max_word_length=8, char_dim=4,
                widths=[1, 2, 3], features=[2, 3, 3], corr_dim=3, char_head_dim=4, char_head_hidden=6, char_head_proj=4)
    base.update(arch)
    model = LanguageModel(base, WORDS)
    _redraw(model.parameters(), rng)
    inputs = np.array([[1, 3, 4], [5, 6, 2]])
    targets = np.array([[3, 4, 2], [6, 2, 1]])
    samples = rng.integers(0, len(WORDS), size=5)
    pn = np.full(len(WORDS), 1.0 / len(WORDS))

    # a non-zero carried state gives every recurrent weight a gradient from t=0
    states = [LSTMState(rng.normal(size=s.c.shape), rng.normal(size=s.h.shape)) for s in model.zero_state(2)]

    def loss():
        val, _ = model.loss_and_grad(inputs, targets, [s.copy() for s in states], training=False, samples=samples, pn=pn)
        return val

    return finite_diff_check(loss, model.parameters())


SUITE: dict[str, Callable[[int], float]] = {
    "lstm_cell": check_lstm_cell,
    "lstm_stack_2layer": check_lstm_stack,
    "highway": check_highway,
    "charcnn_embedder": check_charcnn,
    "full_softmax": check_full_softmax,
    "is_loss": check_is_loss,
    "nce_loss": check_nce_loss,
    "cnn_softmax_corr": check_cnn_softmax,
    "char_lstm_head": check_char_head,
    "lm_table_full": lambda s: check_language_model(s, loss="full"),
    "lm_table_nce": lambda s: check_language_model(s, loss="nce", layers=1),
    "lm_charcnn_is": lambda s: check_language_model(s, input="charcnn", layers=1),
    "lm_cnn_softmax": lambda s: check_language_model(s, head="cnn", layers=1),
}


def run_suite(seed: int = 0, names=None) -> dict[str, float]:
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise ValueError(f"unknown gradient checks: {unknown}")
    return {n: SUITE[n](seed) for n in names}

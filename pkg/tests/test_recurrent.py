import numpy as np
import pytest

from lmkit.numeric import ShapeError, make_rng
from lmkit.recurrent import LSTMPCell, LSTMStack, LSTMState, lstm_step, stack_step


def _sig(x):
    return 1 / (1 + np.exp(-x))


def reference_step(W, b, P, x, c, h):
    """Textbook LSTM with projection, gate blocks [i, f, o, g]."""
    H = c.shape[1]
    z = np.concatenate([x, h], axis=1) @ W + b
    i, f, o = _sig(z[:, :H]), _sig(z[:, H:2 * H]), _sig(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c_new = f * c + i * g
    return (o * np.tanh(c_new)) @ P, c_new


def test_cell_matches_reference(rng):
    cell = LSTMPCell(3, 5, 2, make_rng(0))
    x = rng.normal(size=(4, 3))
    st = LSTMState(rng.normal(size=(4, 5)), rng.normal(size=(4, 2)))
    h, new = lstm_step(cell, x, st)
    h_ref, c_ref = reference_step(cell.W.value, cell.b.value, cell.P.value, x, st.c, st.h)
    np.testing.assert_allclose(h, h_ref, rtol=1e-12)
    np.testing.assert_allclose(new.c, c_ref, rtol=1e-12)
    np.testing.assert_array_equal(new.h, h)


def test_init_shapes_and_forget_bias():
    cell = LSTMPCell(3, 5, 2, make_rng(0))
    assert cell.W.shape == (5, 20) and cell.P.shape == (5, 2)
    np.testing.assert_array_equal(cell.b.value[5:10], 1.0)
    assert not cell.b.value[:5].any()
    assert np.abs(cell.W.value).max() <= 1 / np.sqrt(5)


def test_shape_errors():
    cell = LSTMPCell(3, 5, 2, make_rng(0))
    with pytest.raises(ShapeError):
        cell.forward(np.zeros((1, 4)), cell.zero_state(1))
    with pytest.raises(ShapeError):
        LSTMStack([LSTMPCell(3, 5, 2), LSTMPCell(3, 5, 2)])


def test_sequence_equals_stepping_without_dropout(rng):
    stack = LSTMStack([LSTMPCell(3, 4, 2, make_rng(1), "a"), LSTMPCell(2, 5, 3, make_rng(2), "b")])
    X = rng.normal(size=(2, 6, 3))
    states = [LSTMState(rng.normal(size=(2, 4)), rng.normal(size=(2, 2))),
              LSTMState(rng.normal(size=(2, 5)), rng.normal(size=(2, 3)))]
    H, final, _ = stack.forward_sequence(X, [s.copy() for s in states])
    cur = [s.copy() for s in states]
    for t in range(6):
        h, cur = stack_step(stack, X[:, t], cur)
        np.testing.assert_allclose(H[:, t], h, rtol=1e-12, atol=1e-15)
    for a, b in zip(final, cur):
        np.testing.assert_allclose(a.c, b.c, rtol=1e-12)


def test_sequence_backward_equals_step_backward(rng):
    layers = [LSTMPCell(3, 4, 2, make_rng(1), "a"), LSTMPCell(2, 4, 3, make_rng(2), "b")]
    stack = LSTMStack(layers)
    X = rng.normal(size=(2, 4, 3))
    dH = rng.normal(size=(2, 4, 3))
    H, _, caches = stack.forward_sequence(X, stack.zero_state(2))
    dX_seq = stack.backward_sequence(caches, dH)
    g_seq = [p.grad.copy() for p in stack.parameters()]
    for p in stack.parameters():
        p.zero_grad()
    states = stack.zero_state(2)
    step_caches = []
    for t in range(4):
        _, states, c = stack.step(X[:, t], states)
        step_caches.append(c)
    dh = [np.zeros((2, 2)), np.zeros((2, 3))]
    dc = [np.zeros((2, 4)), np.zeros((2, 4))]
    dX_step = np.zeros_like(X)
    for t in range(3, -1, -1):
        dX_step[:, t], dh, dc = stack.step_backward(step_caches[t], dH[:, t], dh, dc)
    np.testing.assert_allclose(dX_seq, dX_step, rtol=1e-10, atol=1e-13)
    for a, p in zip(g_seq, stack.parameters()):
        np.testing.assert_allclose(a, p.grad, rtol=1e-10, atol=1e-13)


def test_dropout_is_seeded_and_off_at_inference(rng):
    stack = LSTMStack([LSTMPCell(3, 4, 2, make_rng(1))], dropout=0.5)
    X = rng.normal(size=(2, 5, 3))
    a, _, _ = stack.forward_sequence(X, stack.zero_state(2), training=True, rng=make_rng(9))
    b, _, _ = stack.forward_sequence(X, stack.zero_state(2), training=True, rng=make_rng(9))
    c, _, _ = stack.forward_sequence(X, stack.zero_state(2), training=False)
    d, _, _ = LSTMStack(stack.layers).forward_sequence(X, stack.zero_state(2))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(c, d)
    assert not np.allclose(a, c)

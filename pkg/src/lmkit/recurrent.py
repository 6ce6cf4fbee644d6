"""LSTM with a projection layer, layer stacking and truncated BPTT plumbing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .numeric import Parameter, ShapeError, dropout_mask


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LSTMState:
    """Carried state of one layer: memory cell c (B, H) and projected output h (B, P)."""

    c: np.ndarray
    h: np.ndarray

    def copy(self) -> "LSTMState":
        return LSTMState(self.c.copy(), self.h.copy())


class LSTMPCell:
    """LSTM cell whose output is projected from hidden_dim down to proj_dim.

    Gates are computed from ``[x; h_prev] @ W + b`` in the order
    ``[input, forget, output, candidate]``.
    """

    def __init__(self, input_dim: int, hidden_dim: int, proj_dim: int, rng=None, name: str = "lstm", forget_bias: float = 1.0):
        self.input_dim, self.hidden_dim, self.proj_dim = input_dim, hidden_dim, proj_dim
        H = hidden_dim
        fan = input_dim + proj_dim
        if rng is None:
            w = np.zeros((fan, 4 * H))
            p = np.zeros((H, proj_dim))
        else:
            w = uniform_init(rng, (fan, 4 * H), fan)
            p = uniform_init(rng, (H, proj_dim), H)
        b = np.zeros(4 * H)
        b[H: 2 * H] = forget_bias
        self.W = Parameter(w, f"{name}.W")
        self.b = Parameter(b, f"{name}.b")
        self.P = Parameter(p, f"{name}.P")

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b, self.P]

    def zero_state(self, batch: int) -> LSTMState:
        return LSTMState(np.zeros((batch, self.hidden_dim)), np.zeros((batch, self.proj_dim)))

    def forward(self, x: np.ndarray, state: LSTMState):
        """One step.  Returns (h, new_state, cache)."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"lstm_step: input shape {x.shape} does not match input_dim {self.input_dim}")
        if state.h.shape != (x.shape[0], self.proj_dim) or state.c.shape != (x.shape[0], self.hidden_dim):
            raise ShapeError(f"lstm_step: state shapes {state.c.shape}, {state.h.shape} do not match batch {x.shape[0]}")
        xh = np.concatenate([x, state.h], axis=1)
        z = xh @ self.W.value + self.b.value
        acts, c, tc, m = kernels.lstm_pointwise_forward(z, state.c)
        h = m @ self.P.value
        return h, LSTMState(c, h), (xh, acts, state.c, tc, m)

    def backward(self, cache, dh: np.ndarray, dc_next: np.ndarray):
        """Accumulate parameter gradients.  Returns (dx, dh_prev, dc_prev)."""
        xh, acts, c_prev, tc, m = cache
        self.P.grad += m.T @ dh
        dm = dh @ self.P.value.T
        dz, dc_prev = kernels.lstm_pointwise_backward(dm, dc_next, acts, c_prev, tc)
        self.W.grad += xh.T @ dz
        self.b.grad += dz.sum(axis=0)
        dxh = dz @ self.W.value.T
        return dxh[:, : self.input_dim], dxh[:, self.input_dim:], dc_prev


def lstm_step(cell: LSTMPCell, x: np.ndarray, state: LSTMState):
    h, new_state, _ = cell.forward(x, state)
    return h, new_state


class LSTMStack:
    """Layers of LSTMPCell with dropout before, between and after them."""

    def __init__(self, layers: Sequence[LSTMPCell], dropout: float = 0.0):
        for lo, hi in zip(layers, layers[1:]):
            if hi.input_dim != lo.proj_dim:
                raise ShapeError(f"layer input_dim {hi.input_dim} does not chain from proj_dim {lo.proj_dim}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.layers = list(layers)
        self.dropout = dropout

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].proj_dim

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_state(self, batch: int) -> list[LSTMState]:
        return [layer.zero_state(batch) for layer in self.layers]

    def _mask(self, shape, training, rng):
        if not training or self.dropout == 0.0:
            return None
        return dropout_mask(shape, self.dropout, rng)

    def step(self, x, states, training=False, rng=None):
        """One time step through all layers.  Returns (top_h, new_states, cache)."""
        masks, caches, new_states = [], [], []
        cur = x
        for k, layer in enumerate(self.layers):
            mk = self._mask(cur.shape, training, rng)
            masks.append(mk)
            if mk is not None:
                cur = cur * mk
            cur, st, cache = layer.forward(cur, states[k])
            caches.append(cache)
            new_states.append(st)
        mk = self._mask(cur.shape, training, rng)
        masks.append(mk)
        if mk is not None:
            cur = cur * mk
        return cur, new_states, (masks, caches)

    def step_backward(self, cache, dtop, dh_rec, dc_rec):
        """Backprop one step.  dh_rec/dc_rec: per-layer gradients flowing in from t+1.

        Returns (dx, dh_prev per layer, dc_prev per layer).
        """
        masks, caches = cache
        g = dtop if masks[-1] is None else dtop * masks[-1]
        dh_prev = [None] * len(self.layers)
        dc_prev = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            g, dh_prev[k], dc_prev[k] = self.layers[k].backward(caches[k], g + dh_rec[k], dc_rec[k])
            if masks[k] is not None:
                g = g * masks[k]
        return g, dh_prev, dc_prev

    def forward_sequence(self, X, states, training=False, rng=None):
        """X: (B, T, D).  Returns (H (B, T, P), final states, caches).

        Runs layer by layer over the whole window so the input-side products
        and the weight gradients become one large matrix product per layer.
        The result equals stepping every layer at every time step.
        """
        B, T, _ = X.shape
        cur = X
        caches, new_states = [], []
        for k, layer in enumerate(self.layers):
            mk = self._mask(cur.shape, training, rng)
            if mk is not None:
                cur = cur * mk
            cur, st, cache = self._layer_forward(layer, cur, states[k])
            caches.append((mk, cache))
            new_states.append(st)
        mk = self._mask(cur.shape, training, rng)
        if mk is not None:
            cur = cur * mk
        return cur, new_states, (caches, mk)

    @staticmethod
    def _layer_forward(layer: LSTMPCell, X, state: LSTMState):
        B, T, D = X.shape
        if D != layer.input_dim:
            raise ShapeError(f"lstm_step: input shape {X.shape} does not match input_dim {layer.input_dim}")
        W = layer.W.value
        Zx = (X.reshape(B * T, D) @ W[:D] + layer.b.value).reshape(B, T, -1)
        Wh = W[D:]
        c, h = state.c, state.h
        H = np.empty((B, T, layer.proj_dim))
        Hprev = np.empty((B, T, layer.proj_dim))
        Cprev = np.empty((B, T, layer.hidden_dim))
        acts_all, tc_all, m_all = [], [], []
        for t in range(T):
            Hprev[:, t] = h
            Cprev[:, t] = c
            acts, c, tc, m = kernels.lstm_pointwise_forward(Zx[:, t] + h @ Wh, c)
            h = m @ layer.P.value
            H[:, t] = h
            acts_all.append(acts)
            tc_all.append(tc)
            m_all.append(m)
        return H, LSTMState(c, h), (X, Hprev, Cprev, acts_all, tc_all, m_all)

    @staticmethod
    def _layer_backward(layer: LSTMPCell, cache, dH):
        X, Hprev, Cprev, acts_all, tc_all, m_all = cache
        B, T, D = X.shape
        W = layer.W.value
        Wh = W[D:]
        P = layer.P.value
        dZ = np.empty((B, T, 4 * layer.hidden_dim))
        M = np.stack(m_all, axis=1)
        dH_total = np.empty_like(dH)
        dh_rec = np.zeros((B, layer.proj_dim))
        dc = np.zeros((B, layer.hidden_dim))
        for t in range(T - 1, -1, -1):
            dh = dH[:, t] + dh_rec
            dH_total[:, t] = dh
            dz, dc = kernels.lstm_pointwise_backward(dh @ P.T, dc, acts_all[t], Cprev[:, t], tc_all[t])
            dZ[:, t] = dz
            dh_rec = dz @ Wh.T
        dZf = dZ.reshape(B * T, -1)
        layer.P.grad += M.reshape(B * T, -1).T @ dH_total.reshape(B * T, -1)
        layer.W.grad[:D] += X.reshape(B * T, D).T @ dZf
        layer.W.grad[D:] += Hprev.reshape(B * T, -1).T @ dZf
        layer.b.grad += dZf.sum(axis=0)
        return (dZf @ W[:D].T).reshape(B, T, D)

    def backward_sequence(self, caches, dH):
        """dH: (B, T, P) gradient of the top outputs.  Gradients stop at t=0."""
        layer_caches, top_mask = caches
        g = dH if top_mask is None else dH * top_mask
        for layer, (mk, cache) in zip(reversed(self.layers), reversed(layer_caches)):
            g = self._layer_backward(layer, cache, g)
            if mk is not None:
                g = g * mk
        return g


def stack_step(stack: LSTMStack, x, states, training=False, rng=None):
    h, new_states, _ = stack.step(x, states, training, rng)
    return h, new_states


def detach(states: Sequence[LSTMState]) -> list[LSTMState]:
    return [s.copy() for s in states]

"""Hot inner loops, with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``LMKIT_NO_NUMBA`` is unset (or ``0``).  Both paths are always
importable as ``kernels.numpy_impl`` / ``kernels.numba_impl`` so tests and
the benchmark can compare them directly.

Kernels:

* ``lstm_pointwise_forward`` / ``lstm_pointwise_backward``: the fused gate
  nonlinearities and cell update of one LSTM step.
* ``conv_maxpool_forward`` / ``conv_maxpool_backward``: valid 1-d
  convolution over character embeddings followed by max over time.
* ``scatter_add_rows``: ``dst[idx[i]] += src[i]`` with repeated indices.
"""
from __future__ import annotations

import os
import types

import numpy as np

__all__ = [
    "USE_NUMBA",
    "HAVE_NUMBA",
    "numpy_impl",
    "numba_impl",
    "lstm_pointwise_forward",
    "lstm_pointwise_backward",
    "conv_maxpool_forward",
    "conv_maxpool_backward",
    "scatter_add_rows",
]


def _flag_disabled() -> bool:
    return os.environ.get("LMKIT_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ----------------------------------------------------------------------------
# numpy reference path
# ----------------------------------------------------------------------------

def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_lstm_pointwise_forward(z, c_prev):
    """z: (B, 4H) preactivations ordered [i, f, o, g]; c_prev: (B, H).

    Returns (acts, c, tanh_c, m) where acts holds the activated gates in the
    same layout as z.
    """
    H = c_prev.shape[1]
    acts = np.empty_like(z)
    acts[:, : 3 * H] = _sigmoid(z[:, : 3 * H])
    acts[:, 3 * H:] = np.tanh(z[:, 3 * H:])
    i = acts[:, :H]
    f = acts[:, H: 2 * H]
    o = acts[:, 2 * H: 3 * H]
    g = acts[:, 3 * H:]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    m = o * tc
    return acts, c, tc, m


def _np_lstm_pointwise_backward(dm, dc_next, acts, c_prev, tc):
    H = c_prev.shape[1]
    i = acts[:, :H]
    f = acts[:, H: 2 * H]
    o = acts[:, 2 * H: 3 * H]
    g = acts[:, 3 * H:]
    dc = dc_next + dm * o * (1.0 - tc * tc)
    dz = np.empty_like(acts)
    dz[:, :H] = dc * g * i * (1.0 - i)
    dz[:, H: 2 * H] = dc * c_prev * f * (1.0 - f)
    dz[:, 2 * H: 3 * H] = dm * tc * o * (1.0 - o)
    dz[:, 3 * H:] = dc * i * (1.0 - g * g)
    dc_prev = dc * f
    return dz, dc_prev


def _windows(x, width):
    # (N, L, C) -> (N, L-w+1, w*C), a copy so the matmul sees contiguous rows
    N, L, C = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)  # (N, L-w+1, C, w)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(N, L - width + 1, width * C)


def _np_conv_maxpool_forward(x, w, b, width):
    """x: (N, L, C) char embeddings; w: (width*C, F); b: (F,).

    Returns (out, arg): out[n, f] = max_t (window_t . w[:, f]) + b[f] and the
    first time index attaining the max.
    """
    conv = _windows(x, width) @ w  # (N, P, F)
    arg = np.argmax(conv, axis=1)
    out = np.take_along_axis(conv, arg[:, None, :], axis=1)[:, 0, :] + b
    return out, arg.astype(np.int64)


def _np_conv_maxpool_backward(x, w, arg, dout, width):
    N, L, C = x.shape
    F = w.shape[1]
    win = _windows(x, width)  # (N, P, w*C)
    sel = win[np.arange(N)[:, None], arg]  # (N, F, w*C)
    dw = np.einsum("nfk,nf->kf", sel, dout)
    db = dout.sum(axis=0)
    contrib = (dout[:, :, None] * w.T[None, :, :]).reshape(N, F, width, C)
    dx = np.zeros_like(x)
    rows = np.repeat(np.arange(N), F * width)
    cols = (arg[:, :, None] + np.arange(width)[None, None, :]).reshape(-1)
    np.add.at(dx, (rows, cols), contrib.reshape(-1, C))
    return dx, dw, db


def _np_scatter_add_rows(dst, idx, src):
    np.add.at(dst, idx, src)
    return dst


numpy_impl = types.SimpleNamespace(
    lstm_pointwise_forward=_np_lstm_pointwise_forward,
    lstm_pointwise_backward=_np_lstm_pointwise_backward,
    conv_maxpool_forward=_np_conv_maxpool_forward,
    conv_maxpool_backward=_np_conv_maxpool_backward,
    scatter_add_rows=_np_scatter_add_rows,
)


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _build_numba():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _sig(v):
        if v >= 0.0:
            return 1.0 / (1.0 + np.exp(-v))
        e = np.exp(v)
        return e / (1.0 + e)

    @njit
    def lstm_fwd(z, c_prev):
        B, H = c_prev.shape
        acts = np.empty_like(z)
        c = np.empty_like(c_prev)
        tc = np.empty_like(c_prev)
        m = np.empty_like(c_prev)
        for r in range(B):
            for j in range(H):
                i = _sig(z[r, j])
                f = _sig(z[r, H + j])
                o = _sig(z[r, 2 * H + j])
                g = np.tanh(z[r, 3 * H + j])
                acts[r, j] = i
                acts[r, H + j] = f
                acts[r, 2 * H + j] = o
                acts[r, 3 * H + j] = g
                cc = f * c_prev[r, j] + i * g
                t = np.tanh(cc)
                c[r, j] = cc
                tc[r, j] = t
                m[r, j] = o * t
        return acts, c, tc, m

    @njit
    def lstm_bwd(dm, dc_next, acts, c_prev, tc):
        B, H = c_prev.shape
        dz = np.empty_like(acts)
        dc_prev = np.empty_like(c_prev)
        for r in range(B):
            for j in range(H):
                i = acts[r, j]
                f = acts[r, H + j]
                o = acts[r, 2 * H + j]
                g = acts[r, 3 * H + j]
                t = tc[r, j]
                d_m = dm[r, j]
                dc = dc_next[r, j] + d_m * o * (1.0 - t * t)
                dz[r, j] = dc * g * i * (1.0 - i)
                dz[r, H + j] = dc * c_prev[r, j] * f * (1.0 - f)
                dz[r, 2 * H + j] = d_m * t * o * (1.0 - o)
                dz[r, 3 * H + j] = dc * i * (1.0 - g * g)
                dc_prev[r, j] = dc * f
        return dz, dc_prev

    @njit
    def _im2col(x, width):
        N, L, C = x.shape
        P = L - width + 1
        win = np.empty((N, P, width * C), dtype=x.dtype)
        for n in range(N):
            for t in range(P):
                for s in range(width):
                    for ch in range(C):
                        win[n, t, s * C + ch] = x[n, t + s, ch]
        return win

    @njit
    def conv_fwd(x, w, b, width):
        N, L, C = x.shape
        P = L - width + 1
        F = w.shape[1]
        win = _im2col(x, width).reshape(N * P, width * C)
        conv = np.dot(win, w)
        out = np.empty((N, F), dtype=x.dtype)
        arg = np.empty((N, F), dtype=np.int64)
        for n in range(N):
            base = n * P
            for f in range(F):
                best = conv[base, f]
                bi = 0
                for t in range(1, P):
                    v = conv[base + t, f]
                    if v > best:
                        best = v
                        bi = t
                out[n, f] = best + b[f]
                arg[n, f] = bi
        return out, arg

    @njit
    def conv_bwd(x, w, arg, dout, width):
        N, L, C = x.shape
        F = w.shape[1]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        db = np.zeros(F, dtype=x.dtype)
        for n in range(N):
            for f in range(F):
                g = dout[n, f]
                if g == 0.0:
                    continue
                t0 = arg[n, f]
                db[f] += g
                for s in range(width):
                    for ch in range(C):
                        k = s * C + ch
                        dw[k, f] += x[n, t0 + s, ch] * g
                        dx[n, t0 + s, ch] += w[k, f] * g
        return dx, dw, db

    @njit
    def scatter(dst, idx, src):
        R = idx.shape[0]
        D = dst.shape[1]
        for r in range(R):
            row = idx[r]
            for j in range(D):
                dst[row, j] += src[r, j]
        return dst

    def scatter_add_rows(dst, idx, src):
        idx = np.asarray(idx, dtype=np.int64)
        if dst.ndim == 1:
            scatter(dst.reshape(-1, 1), idx, np.ascontiguousarray(src).reshape(-1, 1))
            return dst
        return scatter(dst, idx, np.ascontiguousarray(src))

    def conv_maxpool_forward(x, w, b, width):
        return conv_fwd(np.ascontiguousarray(x), np.ascontiguousarray(w), b, width)

    def conv_maxpool_backward(x, w, arg, dout, width):
        return conv_bwd(np.ascontiguousarray(x), np.ascontiguousarray(w), arg,
                        np.ascontiguousarray(dout), width)

    def lstm_pointwise_forward(z, c_prev):
        return lstm_fwd(np.ascontiguousarray(z), np.ascontiguousarray(c_prev))

    def lstm_pointwise_backward(dm, dc_next, acts, c_prev, tc):
        return lstm_bwd(np.ascontiguousarray(dm), np.ascontiguousarray(dc_next),
                        acts, np.ascontiguousarray(c_prev), tc)

    return types.SimpleNamespace(
        lstm_pointwise_forward=lstm_pointwise_forward,
        lstm_pointwise_backward=lstm_pointwise_backward,
        conv_maxpool_forward=conv_maxpool_forward,
        conv_maxpool_backward=conv_maxpool_backward,
        scatter_add_rows=scatter_add_rows,
    )


numba_impl = _build_numba() if HAVE_NUMBA else None

USE_NUMBA = HAVE_NUMBA and not _flag_disabled()
_active = numba_impl if USE_NUMBA else numpy_impl

lstm_pointwise_forward = _active.lstm_pointwise_forward
lstm_pointwise_backward = _active.lstm_pointwise_backward
conv_maxpool_forward = _active.conv_maxpool_forward
conv_maxpool_backward = _active.conv_maxpool_backward
scatter_add_rows = _active.scatter_add_rows

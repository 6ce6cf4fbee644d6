"""Input-side word representations: a lookup table or a character CNN with highway layers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .corpus import CharCodec
from .numeric import Parameter, ShapeError, sigmoid
from .recurrent import uniform_init

DESK_WIDTHS = (1, 2, 3, 4, 5)
DESK_FEATURES = (16, 24, 32, 32, 24)


class WordEmbeddingTable:
    def __init__(self, vocab_size: int, dim: int, rng=None, name: str = "embed"):
        value = np.zeros((vocab_size, dim)) if rng is None else uniform_init(rng, (vocab_size, dim), dim)
        self.E = Parameter(value, f"{name}.E")

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.E]

    def num_parameters(self) -> int:
        return self.E.size

    def forward(self, ids: np.ndarray):
        ids = np.asarray(ids)
        V = self.E.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise IndexError(f"word id out of range for table of {V} rows")
        return self.E.value[ids], ids

    def backward(self, cache, grad: np.ndarray) -> None:
        ids = cache
        kernels.scatter_add_rows(self.E.grad, ids.reshape(-1), grad.reshape(-1, self.dim))


def embed_word(table: WordEmbeddingTable, idx: int) -> np.ndarray:
    return table.forward(np.array([idx]))[0][0]


class Highway:
    """y = t * relu(x H + bH) + (1 - t) * x, with t = sigmoid(x T + bT)."""

    def __init__(self, dim: int, rng=None, name: str = "highway", carry_bias: float = -2.0):
        if rng is None:
            t = np.zeros((dim, dim))
            h = np.zeros((dim, dim))
        else:
            t = uniform_init(rng, (dim, dim), dim)
            h = uniform_init(rng, (dim, dim), dim)
        self.T = Parameter(t, f"{name}.T")
        self.bT = Parameter(np.full(dim, carry_bias), f"{name}.bT")
        self.H = Parameter(h, f"{name}.H")
        self.bH = Parameter(np.zeros(dim), f"{name}.bH")

    def parameters(self) -> list[Parameter]:
        return [self.T, self.bT, self.H, self.bH]

    def forward(self, x):
        if x.shape[-1] != self.T.shape[0]:
            raise ShapeError(f"highway: input shape {x.shape} does not match {self.T.shape}")
        t = sigmoid(x @ self.T.value + self.bT.value)
        a = x @ self.H.value + self.bH.value
        g = np.maximum(a, 0.0)
        y = t * g + (1.0 - t) * x
        return y, (x, t, a, g)

    def backward(self, cache, dy):
        x, t, a, g = cache
        dt = dy * (g - x)
        dzt = dt * t * (1.0 - t)
        da = dy * t * (a > 0)
        self.T.grad += x.T @ dzt
        self.bT.grad += dzt.sum(axis=0)
        self.H.grad += x.T @ da
        self.bH.grad += da.sum(axis=0)
        return dy * (1.0 - t) + dzt @ self.T.value.T + da @ self.H.value.T


def highway(x, layer: Highway):
    return layer.forward(x)[0]


class CharCNNEmbedder:
    """Character embeddings -> valid conv per width -> max over time -> tanh
    -> highway layers -> affine to ``out_dim``."""

    def __init__(
        self,
        out_dim: int,
        max_word_length: int = 16,
        char_dim: int = 16,
        widths: Sequence[int] = DESK_WIDTHS,
        features: Sequence[int] = DESK_FEATURES,
        n_highway: int = 2,
        rng=None,
        name: str = "charcnn",
        out_bias: bool = True,
    ):
        if len(widths) != len(features):
            raise ValueError("widths and features must have equal length")
        if max(widths) > max_word_length:
            raise ValueError("filter wider than the word")
        self.codec = CharCodec(max_word_length)
        self.widths = tuple(int(w) for w in widths)
        self.features = tuple(int(f) for f in features)
        self.char_dim = char_dim
        self.out_dim = out_dim
        nf = sum(self.features)
        self.n_features = nf

        def init(shape, fan):
            return np.zeros(shape) if rng is None else uniform_init(rng, shape, fan)

        self.C = Parameter(init((CharCodec.SIZE, char_dim), char_dim), f"{name}.chars")
        self.filters = []
        for w, n in zip(self.widths, self.features):
            self.filters.append(
                (
                    Parameter(init((w * char_dim, n), w * char_dim), f"{name}.conv{w}.W"),
                    Parameter(np.zeros(n), f"{name}.conv{w}.b"),
                )
            )
        self.highways = [Highway(nf, rng, f"{name}.hw{k}") for k in range(n_highway)]
        self.Wo = Parameter(init((nf, out_dim), nf), f"{name}.out.W")
        # a shared output shift is invisible to softmax-type losses, so heads drop it
        self.bo = Parameter(np.zeros(out_dim), f"{name}.out.b") if out_bias else None

    def parameters(self) -> list[Parameter]:
        ps = [self.C]
        for w, b in self.filters:
            ps += [w, b]
        for hw in self.highways:
            ps += hw.parameters()
        return ps + [self.Wo] + ([self.bo] if self.bo is not None else [])

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def dim(self) -> int:
        return self.out_dim

    def forward(self, codes: np.ndarray):
        """codes: (..., max_word_length) -> (..., out_dim)."""
        codes = np.asarray(codes)
        L = self.codec.max_word_length
        if codes.shape[-1] != L:
            raise ShapeError(f"charcnn_embed: code sequences of length {codes.shape[-1]}, expected {L}")
        lead = codes.shape[:-1]
        flat = codes.reshape(-1, L)
        X = self.C.value[flat]
        pre = []
        args = []
        for width, (W, b) in zip(self.widths, self.filters):
            o, a = kernels.conv_maxpool_forward(X, W.value, b.value, width)
            pre.append(o)
            args.append(a)
        y = np.tanh(np.concatenate(pre, axis=1))
        feats = y
        hw_caches = []
        for hw in self.highways:
            y, c = hw.forward(y)
            hw_caches.append(c)
        out = y @ self.Wo.value
        if self.bo is not None:
            out = out + self.bo.value
        return out.reshape(lead + (self.out_dim,)), (flat, X, args, feats, hw_caches, y, lead)

    def backward(self, cache, dout: np.ndarray) -> None:
        flat, X, args, feats, hw_caches, y, lead = cache
        dout = dout.reshape(-1, self.out_dim)
        self.Wo.grad += y.T @ dout
        if self.bo is not None:
            self.bo.grad += dout.sum(axis=0)
        dy = dout @ self.Wo.value.T
        for hw, c in zip(reversed(self.highways), reversed(hw_caches)):
            dy = hw.backward(c, dy)
        dpre = dy * (1.0 - feats * feats)
        dX = np.zeros_like(X)
        col = 0
        for width, (W, b), a, n in zip(self.widths, self.filters, args, self.features):
            dxw, dw, db = kernels.conv_maxpool_backward(X, W.value, a, np.ascontiguousarray(dpre[:, col: col + n]), width)
            W.grad += dw
            b.grad += db
            dX += dxw
            col += n
        kernels.scatter_add_rows(self.C.grad, flat.reshape(-1), dX.reshape(-1, self.char_dim))

    def embed_words(self, words: Sequence[str]) -> np.ndarray:
        return self.forward(self.codec.encode_many(words))[0]


def charcnn_embed(embedder: CharCNNEmbedder, codes: np.ndarray) -> np.ndarray:
    return embedder.forward(np.asarray(codes))[0]


def cosine_similarity(q: np.ndarray, M: np.ndarray) -> np.ndarray:
    qn = q / max(np.linalg.norm(q), 1e-300)
    norms = np.maximum(np.linalg.norm(M, axis=1), 1e-300)
    return (M @ qn) / norms


def nearest_neighbors(embedder: CharCNNEmbedder, query: str, k: int, candidates: Sequence[str]):
    """Top-k candidates by cosine similarity of char-CNN embeddings.

    Returns a list of (word, similarity); ties are ordered by the word string.
    """
    if not candidates:
        raise ValueError("no candidate words")
    vecs = embedder.embed_words([query] + list(candidates))
    sims = cosine_similarity(vecs[0], vecs[1:])
    ranked = sorted(zip(candidates, sims.tolist()), key=lambda ws: (-ws[1], ws[0]))
    return ranked[:k]

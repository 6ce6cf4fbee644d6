"""Output layers and their losses.

Word-vector heads (``FullSoftmaxHead``, ``CNNSoftmaxHead``) score a word as
``z_w = h . e_w (+ b_w)`` and support three training losses:

* ``full``: exact softmax cross-entropy over the vocabulary.
* ``is``: importance-sampled multiclass loss; the true word competes with k
  proposal samples after subtracting ``log p_n(w)`` from each logit.
* ``nce``: independent logistic terms with logits offset by ``log(k p_n(w))``.

``CharLSTMHead`` instead spells the target word one byte at a time.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .corpus import CharCodec
from .embeddings import CharCNNEmbedder
from .numeric import Parameter, log_sigmoid, log_softmax, logsumexp, sigmoid
from .recurrent import LSTMPCell, LSTMState, uniform_init

LOSS_KINDS = ("full", "is", "nce")


def _check_proposal(pn, ids):
    q = np.asarray(pn)[np.asarray(ids)]
    if np.any(q <= 0):
        bad = np.asarray(ids)[q <= 0]
        raise ValueError(f"proposal probability is zero for word ids {sorted(set(bad.tolist()))[:10]}")
    return q


# ----------------------------------------------------------------------------
# loss kernels on logits (batched, samples shared across rows)
# ----------------------------------------------------------------------------

def _weights(n, weights):
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise ValueError("no targets with positive weight")
    return w, total


def full_ce(Z, targets, weights=None):
    """Softmax cross-entropy.  Z: (N, V).  Returns (loss, dZ)."""
    N = Z.shape[0]
    w, total = _weights(N, weights)
    lp = log_softmax(Z)
    rows = np.arange(N)
    loss = -(w * lp[rows, targets]).sum() / total
    dZ = np.exp(lp)
    dZ[rows, targets] -= 1.0
    dZ *= (w / total)[:, None]
    return loss, dZ


def sampled_is(z_pos, z_neg, logq_pos, logq_neg, weights=None):
    """Importance-sampling loss.  z_pos: (N,), z_neg: (N, k); logq_* broadcastable.

    Row loss = -log softmax([z_pos - logq_pos, z_neg - logq_neg])[0].
    """
    N = z_pos.shape[0]
    w, total = _weights(N, weights)
    adj = np.concatenate([(z_pos - logq_pos)[:, None], z_neg - logq_neg], axis=1)
    lp = log_softmax(adj)
    loss = -(w * lp[:, 0]).sum() / total
    p = np.exp(lp) * (w / total)[:, None]
    dpos = p[:, 0] - w / total
    return loss, dpos, p[:, 1:]


def sampled_nce(z_pos, z_neg, logkq_pos, logkq_neg, weights=None):
    """NCE loss.  Row loss = -log s(a_pos) - sum_j log(1 - s(a_j)), a = z - log(k q)."""
    N = z_pos.shape[0]
    w, total = _weights(N, weights)
    a_pos = z_pos - logkq_pos
    a_neg = z_neg - logkq_neg
    row = -log_sigmoid(a_pos) - log_sigmoid(-a_neg).sum(axis=1)
    loss = (w * row).sum() / total
    scale = w / total
    dpos = (sigmoid(a_pos) - 1.0) * scale
    dneg = sigmoid(a_neg) * scale[:, None]
    return loss, dpos, dneg


# ----------------------------------------------------------------------------
# single-example losses over an arbitrary logit function s(ids, h)
# ----------------------------------------------------------------------------

def is_loss(score: Callable, h, target: int, samples: Sequence[int], pn) -> float:
    ids = np.concatenate([[target], np.asarray(samples, dtype=np.int64)])
    q = _check_proposal(pn, ids)
    adj = np.asarray(score(ids, h), dtype=float) - np.log(q)
    return float(logsumexp(adj) - adj[0])


def nce_loss(score: Callable, h, target: int, samples: Sequence[int], pn, k: int | None = None) -> float:
    samples = np.asarray(samples, dtype=np.int64)
    k = len(samples) if k is None else k
    ids = np.concatenate([[target], samples])
    q = _check_proposal(pn, ids)
    a = np.asarray(score(ids, h), dtype=float) - np.log(k * q)
    return float(-log_sigmoid(a[0]) - log_sigmoid(-a[1:]).sum())


# ----------------------------------------------------------------------------
# word-vector heads
# ----------------------------------------------------------------------------

class VectorHead:
    """Shared loss plumbing for heads with logits z_w = h . e_w (+ b_w)."""

    vocab_size: int
    dim: int
    b: Parameter | None = None

    def vectors(self, ids):  # -> (E (n, dim), cache)
        raise NotImplementedError

    def vectors_backward(self, cache, dE) -> None:
        raise NotImplementedError

    def all_vectors(self) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def logits(self, H, ids=None):
        if ids is None:
            E = self.all_vectors()
            Z = H @ E.T
            return Z + self.b.value if self.b is not None else Z
        E, _ = self.vectors(np.asarray(ids))
        Z = H @ E.T
        return Z + self.b.value[ids] if self.b is not None else Z

    def logprobs(self, H) -> np.ndarray:
        """Exactly normalized log-probabilities, (N, V)."""
        return log_softmax(self.logits(H))

    def target_logprobs(self, H, targets) -> np.ndarray:
        lp = self.logprobs(H)
        return lp[np.arange(len(targets)), targets]

    def loss(self, H, targets, kind="full", samples=None, pn=None, weights=None):
        """Mean loss over weighted rows; accumulates head grads.  Returns (loss, dH)."""
        targets = np.asarray(targets)
        if kind == "full":
            E, cache = self._full_vectors()
            Z = H @ E.T
            if self.b is not None:
                Z = Z + self.b.value
            loss, dZ = full_ce(Z, targets, weights)
            if self.b is not None:
                self.b.grad += dZ.sum(axis=0)
            self._full_vectors_backward(cache, dZ.T @ H)
            return loss, dZ @ E
        if kind not in ("is", "nce"):
            raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
        samples = np.asarray(samples, dtype=np.int64)
        k = len(samples)
        uniq, inv = np.unique(np.concatenate([targets, samples]), return_inverse=True)
        Eu, cache = self.vectors(uniq)
        tpos, spos = inv[: len(targets)], inv[len(targets):]
        Et, Es = Eu[tpos], Eu[spos]
        z_pos = np.einsum("nd,nd->n", H, Et)
        z_neg = H @ Es.T
        if self.b is not None:
            z_pos = z_pos + self.b.value[targets]
            z_neg = z_neg + self.b.value[samples]
        q_pos = _check_proposal(pn, targets)
        q_neg = _check_proposal(pn, samples)
        if kind == "is":
            loss, dpos, dneg = sampled_is(z_pos, z_neg, np.log(q_pos), np.log(q_neg)[None, :], weights)
        else:
            loss, dpos, dneg = sampled_nce(z_pos, z_neg, np.log(k * q_pos), np.log(k * q_neg)[None, :], weights)
        dH = dpos[:, None] * Et + dneg @ Es
        dEu = np.zeros_like(Eu)
        kernels.scatter_add_rows(dEu, tpos, dpos[:, None] * H)
        kernels.scatter_add_rows(dEu, spos, dneg.T @ H)
        if self.b is not None:
            np.add.at(self.b.grad, targets, dpos)
            np.add.at(self.b.grad, samples, dneg.sum(axis=0))
        self.vectors_backward(cache, dEu)
        return loss, dH

    def _full_vectors(self):
        return self.vectors(np.arange(self.vocab_size))

    def _full_vectors_backward(self, cache, dE):
        self.vectors_backward(cache, dE)


class FullSoftmaxHead(VectorHead):
    """A stored |V| x dim matrix of output embeddings, optional per-word bias."""

    def __init__(self, vocab_size: int, dim: int, rng=None, bias: bool = False, name: str = "softmax"):
        self.vocab_size, self.dim = vocab_size, dim
        value = np.zeros((vocab_size, dim)) if rng is None else uniform_init(rng, (vocab_size, dim), dim)
        self.E = Parameter(value, f"{name}.E")
        self.b = Parameter(np.zeros(vocab_size), f"{name}.b") if bias else None

    def parameters(self):
        return [self.E] + ([self.b] if self.b is not None else [])

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def vectors(self, ids):
        ids = np.asarray(ids)
        return self.E.value[ids], ids

    def vectors_backward(self, ids, dE):
        kernels.scatter_add_rows(self.E.grad, ids, dE)

    def all_vectors(self):
        return self.E.value

    def _full_vectors(self):
        return self.E.value, None

    def _full_vectors_backward(self, cache, dE):
        self.E.grad += dE


def full_logprob(head: VectorHead, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    return head.logprobs(h[None, :])[0] if h.ndim == 1 else head.logprobs(h)


class CNNSoftmaxHead(VectorHead):
    """e_w = CNN(chars_w) + M corr_w, with its own char-CNN (no sharing with the input side)."""

    def __init__(
        self,
        words: Sequence[str],
        dim: int,
        corr_dim: int = 128,
        max_word_length: int = 16,
        rng=None,
        name: str = "cnnsoftmax",
        **cnn_kwargs,
    ):
        self.vocab_size, self.dim, self.corr_dim = len(words), dim, corr_dim
        self.cnn = CharCNNEmbedder(dim, max_word_length=max_word_length, rng=rng, name=f"{name}.cnn", out_bias=False, **cnn_kwargs)
        self.codes = self.cnn.codec.encode_many(list(words))
        if corr_dim > 0:
            self.M = Parameter(np.zeros((dim, corr_dim)) if rng is None else uniform_init(rng, (dim, corr_dim), corr_dim), f"{name}.M")
            self.corr = Parameter(np.zeros((self.vocab_size, corr_dim)) if rng is None else uniform_init(rng, (self.vocab_size, corr_dim), corr_dim), f"{name}.corr")
        else:
            self.M = self.corr = None
        self.b = None

    def parameters(self):
        ps = self.cnn.parameters()
        if self.M is not None:
            ps += [self.M, self.corr]
        return ps

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def vectors(self, ids):
        ids = np.asarray(ids)
        E, cnn_cache = self.cnn.forward(self.codes[ids])
        if self.M is not None:
            E = E + self.corr.value[ids] @ self.M.value.T
        return E, (ids, cnn_cache)

    def vectors_backward(self, cache, dE):
        ids, cnn_cache = cache
        self.cnn.backward(cnn_cache, dE)
        if self.M is not None:
            self.M.grad += dE.T @ self.corr.value[ids]
            kernels.scatter_add_rows(self.corr.grad, ids, dE @ self.M.value)

    def all_vectors(self, chunk: int = 1024) -> np.ndarray:
        """Every e_w under the current weights; callers reuse it across a whole evaluation."""
        out = np.empty((self.vocab_size, self.dim))
        for s in range(0, self.vocab_size, chunk):
            ids = np.arange(s, min(s + chunk, self.vocab_size))
            out[ids] = self.vectors(ids)[0]
        return out


def cnn_softmax_logit(head: CNNSoftmaxHead, h, word_id: int) -> float:
    """z_w computed on the fly for a single word."""
    e, _ = head.vectors(np.array([word_id]))
    return float(np.asarray(h) @ e[0])


# ----------------------------------------------------------------------------
# character-LSTM head
# ----------------------------------------------------------------------------

class CharLSTMHead:
    """Spells the target word byte by byte with a small LSTM started from an affine of h."""

    def __init__(
        self,
        context_dim: int,
        char_dim: int = 16,
        hidden_dim: int = 128,
        proj_dim: int = 64,
        max_word_length: int = 16,
        rng=None,
        name: str = "charhead",
    ):
        self.codec = CharCodec(max_word_length)
        self.context_dim = context_dim

        def init(shape, fan):
            return np.zeros(shape) if rng is None else uniform_init(rng, shape, fan)

        self.Ec = Parameter(init((CharCodec.SIZE, char_dim), char_dim), f"{name}.chars")
        self.cell = LSTMPCell(char_dim, hidden_dim, proj_dim, rng, name=f"{name}.lstm")
        self.Ac = Parameter(init((context_dim, hidden_dim), context_dim), f"{name}.init_c.W")
        self.bc = Parameter(np.zeros(hidden_dim), f"{name}.init_c.b")
        self.Ah = Parameter(init((context_dim, proj_dim), context_dim), f"{name}.init_h.W")
        self.bh = Parameter(np.zeros(proj_dim), f"{name}.init_h.b")
        self.Wout = Parameter(init((proj_dim, CharCodec.SIZE), proj_dim), f"{name}.out.W")
        self.bout = Parameter(np.zeros(CharCodec.SIZE), f"{name}.out.b")

    def parameters(self):
        return [self.Ec] + self.cell.parameters() + [self.Ac, self.bc, self.Ah, self.bh, self.Wout, self.bout]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return self.codec.encode_many(words)

    def _initial_state(self, H):
        return LSTMState(H @ self.Ac.value + self.bc.value, H @ self.Ah.value + self.bh.value)

    def word_logprob(self, H, codes, need_cache=False):
        """ln p(word | h) for N (h, word) pairs, teacher forced through EOW.

        H: (N, context_dim); codes: (N, L).  Returns (logp (N,), cache).
        """
        codes = np.asarray(codes)
        N, L = codes.shape
        ends = np.argmax(codes == CharCodec.EOW, axis=1)  # EOW position per word
        steps = int(ends.max())
        state = self._initial_state(H)
        logp = np.zeros(N)
        caches = []
        for j in range(steps):
            x = self.Ec.value[codes[:, j]]
            h, state, cell_cache = self.cell.forward(x, state)
            lp = log_softmax(h @ self.Wout.value + self.bout.value)
            valid = j < ends
            tgt = codes[:, j + 1]
            logp += np.where(valid, lp[np.arange(N), tgt], 0.0)
            if need_cache:
                caches.append((cell_cache, h, lp, valid, tgt))
        return logp, (H, codes, caches)

    def backward(self, cache, dlogp):
        """dlogp: (N,) gradient wrt each word's log-prob.  Returns dH."""
        H, codes, caches = cache
        N = H.shape[0]
        rows = np.arange(N)
        dh_rec = np.zeros((N, self.cell.proj_dim))
        dc_rec = np.zeros((N, self.cell.hidden_dim))
        for j in range(len(caches) - 1, -1, -1):
            cell_cache, h, lp, valid, tgt = caches[j]
            g = np.where(valid, dlogp, 0.0)
            dlogits = -np.exp(lp) * g[:, None]
            dlogits[rows, tgt] += g
            self.Wout.grad += h.T @ dlogits
            self.bout.grad += dlogits.sum(axis=0)
            dh = dlogits @ self.Wout.value.T + dh_rec
            dx, dh_rec, dc_rec = self.cell.backward(cell_cache, dh, dc_rec)
            kernels.scatter_add_rows(self.Ec.grad, codes[:, j], dx)
        self.Ac.grad += H.T @ dc_rec
        self.bc.grad += dc_rec.sum(axis=0)
        self.Ah.grad += H.T @ dh_rec
        self.bh.grad += dh_rec.sum(axis=0)
        return dc_rec @ self.Ac.value.T + dh_rec @ self.Ah.value.T

    def loss(self, H, target_codes, weights=None):
        """Mean -ln p(word | h) over weighted rows.  Returns (loss, dH)."""
        N = H.shape[0]
        w, total = _weights(N, weights)
        logp, cache = self.word_logprob(H, target_codes, need_cache=True)
        loss = -(w * logp).sum() / total
        dH = self.backward(cache, -w / total)
        return float(loss), dH

    # -- exact in-vocabulary renormalization via a prefix trie ---------------
    def vocab_logprobs(self, H, vocab_codes, chunk: int = 8) -> np.ndarray:
        """ln p_char(v | h) for every row of H and every vocabulary word: (N, V)."""
        trie = _PrefixTrie(vocab_codes)
        N = H.shape[0]
        out = np.empty((N, trie.n_words))
        for s in range(0, N, chunk):
            out[s: s + chunk] = self._trie_logprobs(H[s: s + chunk], trie)
        return out

    def _trie_logprobs(self, H, trie):
        n = H.shape[0]
        init = self._initial_state(H)
        total = np.zeros((n, trie.n_words))
        states_c = {}
        states_h = {}
        for depth, nodes in enumerate(trie.levels):
            m = len(nodes)
            if depth == 0:
                c_prev = init.c[:, None, :].repeat(m, axis=1)
                h_prev = init.h[:, None, :].repeat(m, axis=1)
            else:
                par = trie.parent_slot[nodes]
                c_prev = states_c[depth - 1][:, par, :]
                h_prev = states_h[depth - 1][:, par, :]
            x = self.Ec.value[trie.last_code[nodes]]
            xr = np.broadcast_to(x[None], (n, m, x.shape[1])).reshape(n * m, -1)
            st = LSTMState(c_prev.reshape(n * m, -1), h_prev.reshape(n * m, -1))
            h, st, _ = self.cell.forward(xr, st)
            states_c[depth] = st.c.reshape(n, m, -1)
            states_h[depth] = st.h.reshape(n, m, -1)
            lp = log_softmax(h @ self.Wout.value + self.bout.value).reshape(n, m, -1)
            wi, slot, code = trie.uses[depth]
            total[:, wi] += lp[:, slot, code]  # each word appears once per depth
            if depth >= 1:
                del states_c[depth - 1], states_h[depth - 1]
        return total


class _PrefixTrie:
    """Distinct code prefixes of a word list, grouped by depth."""

    def __init__(self, codes):
        codes = np.asarray(codes)
        self.n_words = codes.shape[0]
        ends = np.argmax(codes == CharCodec.EOW, axis=1)
        node_of = {}
        depth_nodes: list[list[int]] = []
        parent, last, slot = [], [], []
        uses: dict[int, list] = {}
        for w in range(self.n_words):
            prev = -1
            for j in range(int(ends[w])):
                key = tuple(codes[w, : j + 1].tolist())
                nid = node_of.get(key)
                if nid is None:
                    nid = len(parent)
                    node_of[key] = nid
                    parent.append(prev)
                    last.append(int(codes[w, j]))
                    while len(depth_nodes) <= j:
                        depth_nodes.append([])
                    slot.append(len(depth_nodes[j]))
                    depth_nodes[j].append(nid)
                uses.setdefault(j, []).append((w, slot[nid], int(codes[w, j + 1])))
                prev = nid
        parent_arr = np.array(parent)
        slot_arr = np.array(slot)
        self.levels = [np.array(d) for d in depth_nodes]
        self.last_code = np.array(last)
        self.parent_slot = np.where(parent_arr >= 0, slot_arr[np.maximum(parent_arr, 0)], -1)
        self.uses = {}
        for j in range(len(self.levels)):
            arr = np.array(uses.get(j, []), dtype=np.int64).reshape(-1, 3)
            self.uses[j] = (arr[:, 0], arr[:, 1], arr[:, 2])


def char_lstm_logprob(head: CharLSTMHead, h, word: str | np.ndarray) -> float:
    codes = head.codec.encode(word) if isinstance(word, str) else np.asarray(word)
    lp, _ = head.word_logprob(np.asarray(h, dtype=float)[None, :], codes[None, :])
    return float(lp[0])


def marginalize_in_vocab(head: CharLSTMHead, h, vocab_codes) -> np.ndarray:
    """p'(w) = p_char(w|h) / sum_v p_char(v|h) over the vocabulary, as log-probs."""
    H = np.asarray(h, dtype=float)
    single = H.ndim == 1
    lp = head.vocab_logprobs(H[None, :] if single else H, vocab_codes)
    norm = logsumexp(lp, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("char head assigns zero mass to the whole vocabulary")
    out = lp - norm
    return out[0] if single else out

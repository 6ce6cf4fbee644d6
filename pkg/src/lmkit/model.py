"""Word-level LSTM language model assembled from an architecture descriptor.

    input embedding (table | char-CNN) -> LSTMStack -> head (full | cnn | char)

The descriptor is a plain dict so it can be written into checkpoints and
config files verbatim.
"""
from __future__ import annotations

import copy
import math
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, target_mask
from .embeddings import DESK_FEATURES, DESK_WIDTHS, CharCNNEmbedder, WordEmbeddingTable
from .numeric import Parameter, make_rng
from .recurrent import LSTMPCell, LSTMStack, LSTMState, detach
from .softmax_heads import CharLSTMHead, CNNSoftmaxHead, FullSoftmaxHead, VectorHead

DEFAULT_ARCH = {
    "input": "table",
    "embed_dim": 128,
    "hidden_dim": 256,
    "proj_dim": 128,
    "layers": 1,
    "dropout": 0.1,
    "head": "full",
    "loss": "is",
    "bias": False,
    "corr_dim": 128,
    "max_word_length": 16,
    "char_dim": 16,
    "widths": list(DESK_WIDTHS),
    "features": list(DESK_FEATURES),
    "n_highway": 2,
    "char_head_dim": 16,
    "char_head_hidden": 128,
    "char_head_proj": 64,
    "init_seed": 1,
}


class NonFiniteLossError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf; carries diagnostics."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


def resolve_arch(arch: dict | None = None, **overrides) -> dict:
    out = copy.deepcopy(DEFAULT_ARCH)
    out.update(arch or {})
    out.update(overrides)
    unknown = set(out) - set(DEFAULT_ARCH) - {"vocab_size"}
    if unknown:
        raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
    if out["input"] not in ("table", "charcnn"):
        raise ValueError(f"input must be 'table' or 'charcnn', got {out['input']!r}")
    if out["head"] not in ("full", "cnn", "char"):
        raise ValueError(f"head must be 'full', 'cnn' or 'char', got {out['head']!r}")
    if out["loss"] not in ("full", "is", "nce"):
        raise ValueError(f"loss must be 'full', 'is' or 'nce', got {out['loss']!r}")
    return out


class LanguageModel:
    def __init__(self, arch: dict, words: Sequence[str]):
        arch = resolve_arch(arch)
        arch["vocab_size"] = len(words)
        self.arch = arch
        self.words = list(words)
        V = len(words)
        rng = make_rng(arch["init_seed"])
        P = arch["proj_dim"]
        cnn_kw = dict(char_dim=arch["char_dim"], widths=arch["widths"], features=arch["features"], n_highway=arch["n_highway"])
        if arch["input"] == "table":
            self.embedder = WordEmbeddingTable(V, arch["embed_dim"], rng, name="embed")
            in_dim = arch["embed_dim"]
            self.codes = None
        else:
            self.embedder = CharCNNEmbedder(arch["embed_dim"], max_word_length=arch["max_word_length"], rng=rng, name="embed", **cnn_kw)
            in_dim = arch["embed_dim"]
            self.codes = self.embedder.codec.encode_many(self.words)
        layers = []
        for k in range(arch["layers"]):
            layers.append(LSTMPCell(in_dim if k == 0 else P, arch["hidden_dim"], P, rng, name=f"lstm{k}"))
        self.stack = LSTMStack(layers, arch["dropout"])
        if arch["head"] == "full":
            self.head = FullSoftmaxHead(V, P, rng, bias=arch["bias"], name="softmax")
        elif arch["head"] == "cnn":
            self.head = CNNSoftmaxHead(self.words, P, corr_dim=arch["corr_dim"], max_word_length=arch["max_word_length"], rng=rng, name="cnnsoftmax", **cnn_kw)
        else:
            self.head = CharLSTMHead(P, char_dim=arch["char_head_dim"], hidden_dim=arch["char_head_hidden"], proj_dim=arch["char_head_proj"], max_word_length=arch["max_word_length"], rng=rng, name="charhead")
            self.target_codes = self.head.encode(self.words)

    # -- parameters ---------------------------------------------------------
    def base_parameters(self) -> list[Parameter]:
        return self.embedder.parameters() + self.stack.parameters()

    def head_parameters(self) -> list[Parameter]:
        return self.head.parameters()

    def parameters(self) -> list[Parameter]:
        return self.base_parameters() + self.head_parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def input_parameter_count(self) -> int:
        return self.embedder.num_parameters()

    def load_base_from(self, other: "LanguageModel") -> None:
        """Copy embedder and LSTM values from another model with the same base."""
        src = other.named_parameters()
        for p in self.base_parameters():
            if p.name not in src or src[p.name].shape != p.shape:
                raise ValueError(f"base parameter {p.name} missing or mismatched in source model")
            p.value[...] = src[p.name].value

    @property
    def vocab_size(self) -> int:
        return len(self.words)

    @property
    def is_char_head(self) -> bool:
        return isinstance(self.head, CharLSTMHead)

    def zero_state(self, batch: int) -> list[LSTMState]:
        return self.stack.zero_state(batch)

    # -- base network -------------------------------------------------------
    def embed(self, ids):
        if self.codes is None:
            return self.embedder.forward(ids)
        uniq, inv = np.unique(ids, return_inverse=True)
        E, cache = self.embedder.forward(self.codes[uniq])
        return E[inv.reshape(ids.shape)], (uniq, inv, cache)

    def embed_backward(self, cache, dX):
        if self.codes is None:
            self.embedder.backward(cache, dX)
            return
        uniq, inv, cnn_cache = cache
        dE = np.zeros((len(uniq), dX.shape[-1]))
        np.add.at(dE, inv.reshape(-1), dX.reshape(-1, dX.shape[-1]))
        self.embedder.backward(cnn_cache, dE)

    def forward_hidden(self, inputs, states, training=False, rng=None):
        X, ecache = self.embed(np.asarray(inputs))
        H, states, caches = self.stack.forward_sequence(X, states, training, rng)
        return H, states, (ecache, caches)

    def backward_hidden(self, cache, dH):
        ecache, caches = cache
        dX = self.stack.backward_sequence(caches, dH)
        self.embed_backward(ecache, dX)

    # -- training -----------------------------------------------------------
    def loss_and_grad(self, inputs, targets, states, training=True, rng=None, samples=None, pn=None, backprop_base=True):
        """Mean loss over the counted targets of a (B, T) window.

        Gradients are accumulated into the parameters; the returned states are
        detached copies of the time-T states.
        """
        inputs = np.asarray(inputs)
        targets = np.asarray(targets)
        B, T = inputs.shape
        H, new_states, cache = self.forward_hidden(inputs, states, training, rng)
        Hf = H.reshape(B * T, -1)
        tf = targets.reshape(-1)
        weights = target_mask(tf).astype(float)
        if weights.sum() == 0:
            return 0.0, detach(new_states)
        if self.is_char_head:
            loss, dHf = self.head.loss(Hf, self.target_codes[tf], weights)
        else:
            loss, dHf = self.head.loss(Hf, tf, self.arch["loss"], samples, pn, weights)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss}", {"inputs": inputs.tolist()})
        if backprop_base:
            self.backward_hidden(cache, dHf.reshape(B, T, -1))
        return float(loss), detach(new_states)

    # -- inference ----------------------------------------------------------
    def head_logprobs(self, H, marginalize=True, table=None):
        """Normalized (N, V) log-probabilities for hidden states H."""
        if self.is_char_head:
            lp = self.head.vocab_logprobs(H, self.target_codes)
            if marginalize:
                lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
            return lp
        if table is not None:
            from .numeric import log_softmax

            Z = H @ table.T
            if self.head.b is not None:
                Z = Z + self.head.b.value
            return log_softmax(Z)
        return self.head.logprobs(H)

    def output_table(self):
        if isinstance(self.head, VectorHead):
            return self.head.all_vectors()
        return None

    def target_logprobs(self, H, targets, marginalize=True, table=None, chunk=512):
        N = H.shape[0]
        out = np.empty(N)
        if self.is_char_head and not marginalize:
            for s in range(0, N, chunk):
                sl = slice(s, s + chunk)
                out[sl] = self.head.word_logprob(H[sl], self.target_codes[targets[sl]])[0]
            return out
        for s in range(0, N, chunk):
            sl = slice(s, s + chunk)
            lp = self.head_logprobs(H[sl], marginalize, table)
            out[sl] = lp[np.arange(lp.shape[0]), targets[sl]]
        return out

    def score_stream(self, inputs, targets, states=None, chunk=256, marginalize=True):
        """ln p of each target in a single (B=1) stream, carrying LSTM state.

        Returns (logp (N,), final states).
        """
        inputs = np.asarray(inputs).reshape(-1)
        targets = np.asarray(targets).reshape(-1)
        states = self.zero_state(1) if states is None else states
        Hs = []
        for s in range(0, len(inputs), chunk):
            H, states, _ = self.forward_hidden(inputs[None, s: s + chunk], states, training=False)
            Hs.append(H[0])
        H = np.concatenate(Hs, axis=0) if Hs else np.zeros((0, self.arch["proj_dim"]))
        table = self.output_table()
        return self.target_logprobs(H, targets, marginalize, table), states

    def step_logprobs(self, token: int, states, table=None):
        """Next-word distribution after feeding ``token``; used by the sampler."""
        H, states, _ = self.forward_hidden(np.array([[token]]), states, training=False)
        return self.head_logprobs(H[0], table=table)[0], states


def unroll_bptt(model: LanguageModel, inputs, targets, states, training=True, rng=None, samples=None, pn=None):
    """Truncated BPTT over one (B, T) window.  Returns (mean loss, carried states)."""
    return model.loss_and_grad(inputs, targets, states, training, rng, samples, pn)



__all__ = [
    "DEFAULT_ARCH",
    "LanguageModel",
    "NonFiniteLossError",
    "resolve_arch",
    "unroll_bptt",
    "BOS_ID",
    "EOS_ID",
]

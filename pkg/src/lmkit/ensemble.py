"""Linear interpolation of language models in probability space.

Members are scorers (see ``evaluation``).  Weight optimization works on a
cached (tokens, members) matrix of log-probabilities, which can be written to
and read from a small binary file:

    offset  size  field
    0       8     magic b"LMKMIX\\0\\0"
    8       4     format version (uint32 LE)
    12      4     member count J (uint32 LE)
    16      8     token count N (uint64 LE)
    24      ...   J names, each uint32 LE byte length + UTF-8 bytes
    ...     8NJ   float64 LE log-probabilities, one record of J values per token
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import Scorer, count_targets

CACHE_MAGIC = b"LMKMIX\0\0"
CACHE_VERSION = 1


def mix_prob(weights, member_probs):
    """sum_j w_j p_j; member_probs has the member axis first."""
    w = np.asarray(weights, dtype=float)
    p = np.asarray(member_probs, dtype=float)
    return np.tensordot(w, p, axes=(0, 0))


def mix_logprob(weights, member_logprobs: np.ndarray) -> np.ndarray:
    """ln sum_j w_j exp(l_j) for (J, N) log-probabilities, computed stably."""
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(w)[:, None]
    return np.logaddexp.reduce(lw + member_logprobs, axis=0)


def _check_weights(w, J):
    w = np.asarray(w, dtype=float)
    if w.shape != (J,):
        raise ValueError(f"expected {J} weights, got shape {w.shape}")
    if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
    return w


@dataclass
class Mixture:
    members: list
    weights: np.ndarray | None = None
    vocab_ids: list | None = None  # one vocabulary fingerprint per member
    names: list = field(default_factory=list)

    def __post_init__(self):
        J = len(self.members)
        if J == 0:
            raise ValueError("a mixture needs at least one member")
        if self.weights is None:
            self.weights = np.full(J, 1.0 / J)
        self.weights = _check_weights(self.weights, J)
        if self.vocab_ids is not None and len(set(self.vocab_ids)) > 1:
            raise ValueError(f"members use different vocabularies: {sorted(set(map(str, self.vocab_ids)))}")
        if not self.names:
            self.names = [f"member{j}" for j in range(J)]

    def member_logprobs(self, sentences) -> np.ndarray:
        """(J, N) per-token log-probabilities of every member."""
        n = count_targets(sentences)
        rows = []
        for name, m in zip(self.names, self.members):
            lp = np.asarray(m(sentences), dtype=float)
            if lp.shape != (n,):
                raise ValueError(f"member {name} returned {lp.shape} scores for {n} targets")
            rows.append(lp)
        return np.stack(rows)

    def __call__(self, sentences) -> np.ndarray:
        return mix_logprob(self.weights, self.member_logprobs(sentences))

    def distribution(self, member_dists: np.ndarray) -> np.ndarray:
        """Mix full next-word distributions, (J, V) -> (V,)."""
        member_dists = np.asarray(member_dists)
        if member_dists.shape[0] != len(self.members):
            raise ValueError("one distribution per member required")
        return mix_prob(self.weights, member_dists)


@dataclass
class EMResult:
    weights: np.ndarray
    history: list  # mean log-likelihood per token, before and after every iteration
    iterations: int


def optimize_weights(member_logprobs: np.ndarray, max_iter: int = 200, tol: float = 1e-8, init=None) -> EMResult:
    """EM for mixture weights on cached (J, N) heldout log-probabilities.

    Stops after ``max_iter`` iterations or when the mean log-likelihood
    improves by less than ``tol``.
    """
    L = np.asarray(member_logprobs, dtype=float)
    if L.ndim != 2 or L.shape[0] < 2:
        raise ValueError("need a (members >= 2, tokens) matrix of log-probabilities")
    J, N = L.shape
    dead = [j for j in range(J) if np.all(L[j] == -np.inf)]
    if dead:
        raise ValueError(f"member(s) {dead} assign zero probability to every token")
    if np.any(np.isnan(L)) or np.any(L == np.inf):
        raise ValueError("log-probabilities must not be NaN or +inf")
    w = np.full(J, 1.0 / J) if init is None else _check_weights(init, J)
    with np.errstate(divide="ignore"):
        joint = np.log(w)[:, None] + L
    ll = np.logaddexp.reduce(joint, axis=0)
    if np.any(ll == -np.inf):
        raise ValueError("some token has zero probability under every weighted member")
    history = [float(ll.mean())]
    it = 0
    for it in range(1, max_iter + 1):
        resp = np.exp(joint - ll[None, :])
        w = resp.mean(axis=1)
        w /= w.sum()
        with np.errstate(divide="ignore"):
            joint = np.log(w)[:, None] + L
        ll = np.logaddexp.reduce(joint, axis=0)
        history.append(float(ll.mean()))
        if history[-1] - history[-2] < tol:
            break
    return EMResult(w, history, it)


# ----------------------------------------------------------------------------
# on-disk cache of per-token member scores
# ----------------------------------------------------------------------------

def save_cache(path, member_logprobs: np.ndarray, names: Sequence[str]) -> None:
    L = np.asarray(member_logprobs, dtype=float)
    J, N = L.shape
    if len(names) != J:
        raise ValueError("one name per member required")
    head = CACHE_MAGIC + struct.pack("<IIQ", CACHE_VERSION, J, N)
    for n in names:
        b = n.encode("utf-8")
        head += struct.pack("<I", len(b)) + b
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(L.T, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_cache(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a mixture score cache")
    version, J, N = struct.unpack_from("<IIQ", data, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: cache version {version}, this build reads version {CACHE_VERSION}")
    off = 24
    names = []
    for _ in range(J):
        (n,) = struct.unpack_from("<I", data, off)
        names.append(data[off + 4: off + 4 + n].decode("utf-8"))
        off += 4 + n
    expected = off + 8 * N * J
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    L = np.frombuffer(data, dtype="<f8", offset=off).reshape(N, J).T.astype(float)
    return L, names


def perplexity_of(member_logprobs: np.ndarray, weights) -> float:
    return float(math.exp(-mix_logprob(weights, member_logprobs).mean()))


__all__ = ["Mixture", "mix_prob", "mix_logprob", "optimize_weights", "EMResult", "save_cache", "load_cache", "perplexity_of", "Scorer"]

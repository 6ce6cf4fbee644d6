"""Deterministic synthetic English-like corpora for desk-scale experiments.

Each sentence is generated from one of a set of topics.  Topic-specific
nouns, verbs, adjectives and names follow a Zipf law, so most word types are
rare and only predictable once the topic is known from earlier in the
sentence.  Words carry simple morphology (plural ``-s``, verb ``-s/-ed/-ing``)
and topic roots in their spelling, and clauses need subject-verb agreement
across intervening phrases.  Nothing here is downloaded; a seed fully
determines the lexicon and the text.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric.rng import make_rng

_CONS = list("bdfgklmnprstvz") + ["br", "cr", "dr", "gl", "pl", "st", "tr", "sk", "ch", "sh"]
_VOWS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]

DETS_SG = ["a", "this", "that", "every", "one"]
DETS_PL = ["these", "those", "many", "some", "two", "few"]
PREPS = ["of", "in", "on", "with", "for", "from", "near", "under", "about"]
PRON_SG = ["it", "he", "she"]
PRON_PL = ["they", "we"]


@dataclass
class Lexicon:
    topic_nouns: list = field(default_factory=list)  # per topic: list of stems
    topic_verbs: list = field(default_factory=list)
    topic_adjs: list = field(default_factory=list)
    topic_names: list = field(default_factory=list)
    shared_nouns: list = field(default_factory=list)
    shared_verbs: list = field(default_factory=list)
    shared_adjs: list = field(default_factory=list)


def _syllable(rng):
    return _CONS[rng.integers(len(_CONS))] + _VOWS[rng.integers(len(_VOWS))]


def _zipf(n, s=1.1):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def make_lexicon(seed: int = 7, n_topics: int = 12, nouns: int = 60, verbs: int = 20, adjs: int = 12, names: int = 10,
                 shared_nouns: int = 60, shared_verbs: int = 40, shared_adjs: int = 50) -> Lexicon:
    rng = make_rng(seed)
    used: set = set()

    def fresh(n_syll, root=None, suffix=""):
        for attempt in range(1000):
            parts = [_syllable(rng) for _ in range(n_syll + attempt // 50)]
            if root is not None:
                parts.insert(int(rng.integers(0, 2)) * len(parts), root)
            w = "".join(parts) + suffix
            if w not in used and len(w) <= 11:
                used.add(w)
                return w
        raise RuntimeError("lexicon space exhausted")

    lex = Lexicon()
    roots = []
    while len(roots) < n_topics:
        r = _syllable(rng) + _CONS[rng.integers(len(_CONS))][0]
        if r not in roots:
            roots.append(r)
    for t in range(n_topics):
        root = roots[t]
        lex.topic_nouns.append([fresh(int(rng.integers(1, 3)), root if rng.random() < 0.6 else None) for _ in range(nouns)])
        lex.topic_verbs.append([fresh(int(rng.integers(1, 3)), root if rng.random() < 0.4 else None) for _ in range(verbs)])
        lex.topic_adjs.append([fresh(int(rng.integers(1, 3)), None, "ic") for _ in range(adjs)])
        lex.topic_names.append([fresh(2, None).capitalize() for _ in range(names)])
    lex.shared_nouns = [fresh(int(rng.integers(1, 3))) for _ in range(shared_nouns)]
    lex.shared_verbs = [fresh(int(rng.integers(1, 3))) for _ in range(shared_verbs)]
    lex.shared_adjs = [fresh(int(rng.integers(1, 3)), None, "y") for _ in range(shared_adjs)]
    return lex


class SentenceGenerator:
    def __init__(self, lexicon: Lexicon, seed: int):
        self.lex = lexicon
        self.rng = make_rng(seed)
        self.n_topics = len(lexicon.topic_nouns)
        self.topic_p = _zipf(self.n_topics, 0.5)
        self._pz = {}

    def _pick(self, items):
        n = len(items)
        if n not in self._pz:
            self._pz[n] = _zipf(n)
        return items[int(self.rng.choice(n, p=self._pz[n]))]

    def _noun(self, topic, plural):
        r = self.rng.random()
        stem = self._pick(self.lex.topic_nouns[topic]) if r < 0.8 else self._pick(self.lex.shared_nouns)
        return stem + "s" if plural else stem

    def _adj(self, topic):
        if self.rng.random() < 0.5:
            return self._pick(self.lex.topic_adjs[topic])
        return self._pick(self.lex.shared_adjs)

    def _np(self, topic, plural, allow_pp=True, subject=False):
        rng = self.rng
        if subject and rng.random() < 0.15:
            if plural:
                return [PRON_PL[int(rng.integers(len(PRON_PL)))]]
            if rng.random() < 0.5:
                return [self._pick(self.lex.topic_names[topic])]
            return [PRON_SG[int(rng.integers(len(PRON_SG)))]]
        out = []
        if rng.random() < 0.45:
            out.append("the")
        else:
            dets = DETS_PL if plural else DETS_SG
            out.append(dets[int(rng.integers(len(dets)))])
        u = rng.random()
        n_adj = 0 if u < 0.55 else (1 if u < 0.88 else 2)
        out += [self._adj(topic) for _ in range(n_adj)]
        out.append(self._noun(topic, plural))
        if allow_pp and rng.random() < 0.3:
            out.append(PREPS[int(rng.integers(len(PREPS)))])
            out += self._np(topic, bool(rng.random() < 0.4), allow_pp=False)
        return out

    def _vp(self, topic, plural):
        rng = self.rng
        stem = self._pick(self.lex.topic_verbs[topic]) if rng.random() < 0.7 else self._pick(self.lex.shared_verbs)
        tense = rng.random()
        if tense < 0.4:
            words = [stem if plural else stem + "s"]
        elif tense < 0.65:
            words = [stem + "ed"]
        elif tense < 0.85:
            aux = ("are" if plural else "is") if rng.random() < 0.6 else ("were" if plural else "was")
            words = [aux, stem + "ing"]
        else:
            words = ["have" if plural else "has", stem + "ed"]
        if rng.random() < 0.85:
            words += self._np(topic, bool(rng.random() < 0.4))
        if rng.random() < 0.25:
            words.append(PREPS[int(rng.integers(len(PREPS)))])
            words += self._np(topic, bool(rng.random() < 0.4), allow_pp=False)
        return words

    def _clause(self, topic):
        plural = bool(self.rng.random() < 0.45)
        return self._np(topic, plural, subject=True) + self._vp(topic, plural)

    def sentence(self) -> list[str]:
        topic = int(self.rng.choice(self.n_topics, p=self.topic_p))
        words = self._clause(topic)
        if self.rng.random() < 0.3:
            words += [",", "and" if self.rng.random() < 0.7 else "but"] + self._clause(topic)
        words.append(".")
        return words


def generate(n_tokens: int, seed: int, lexicon: Lexicon | None = None, lexicon_seed: int = 7) -> list[list[str]]:
    """Sentences until at least ``n_tokens`` tokens (counting one </S> per sentence)."""
    lex = lexicon or make_lexicon(lexicon_seed)
    gen = SentenceGenerator(lex, seed)
    out, total = [], 0
    while total < n_tokens:
        s = gen.sentence()
        out.append(s)
        total += len(s) + 1
    return out


def train_heldout_split(train_tokens: int = 1_000_000, heldout_tokens: int = 50_000, seed: int = 11, lexicon_seed: int = 7):
    lex = make_lexicon(lexicon_seed)
    return generate(train_tokens, seed, lex), generate(heldout_tokens, seed + 1000, lex)


def sharp_bigram_corpus(n_tokens: int = 10_000, vocab: int = 50, seed: int = 3, successors: int = 2):
    """Sentences drawn from a random bigram chain where each word has a few likely successors."""
    rng = make_rng(seed)
    words = [f"w{i}" for i in range(vocab)]
    succ = [rng.choice(vocab, size=successors, replace=False) for _ in range(vocab)]
    out, total = [], 0
    while total < n_tokens:
        cur = int(rng.integers(vocab))
        sent = [words[cur]]
        while len(sent) < 12 and rng.random() > 0.1:
            cur = int(succ[cur][int(rng.integers(successors))])
            sent.append(words[cur])
        out.append(sent)
        total += len(sent) + 1
    return out

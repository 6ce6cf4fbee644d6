"""Named end-to-end experiments.

A recipe is a resolved configuration plus a function that trains whatever
models it needs inside a :class:`Workspace` and returns tables, headline
numbers and pass/fail checks.  Trained runs are cached per workspace by their
resolved configuration, so recipes that share a model (most of them share the
IS-trained table model) train it once.
"""
from __future__ import annotations

import dataclasses
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import (
    Vocabulary,
    build_vocab,
    encode_corpus,
    read_sentences,
    write_sentences,
)
from .ensemble import optimize_weights, perplexity_of, save_cache
from .evaluation import KNScorer, LMScorer, bucket_deltas, perplexity, targets_of
from .model import LanguageModel, resolve_arch
from .ngram import train_kn
from .synthetic import sharp_bigram_corpus, train_heldout_split
from .trainer import TrainConfig, Trainer, dump_config, heldout_slice, resolve_config

BUCKETS = 25
HEAD_EVAL_TOKENS = 1500  # marginalizing the char head costs a full-vocabulary pass per position


@dataclass
class RecipeResult:
    name: str
    values: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # file name -> text
    checks: list = field(default_factory=list)  # (description, passed)
    primary_run: Path | None = None

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)

    def check(self, description: str, ok) -> None:
        self.checks.append((description, bool(ok)))

    def to_text(self) -> str:
        lines = [f"recipe {self.name}"]
        lines += [f"{k} {v:.6g}" if isinstance(v, float) else f"{k} {v}" for k, v in self.values.items()]
        lines += [f"{'PASS' if ok else 'FAIL'} {d}" for d, ok in self.checks]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.values.items()]
        lines += [f"check_{i}={'pass' if ok else 'fail'}" for i, (_, ok) in enumerate(self.checks)]
        return "\n".join(lines) + "\n"

    def merge(self, other: "RecipeResult") -> None:
        self.values.update({f"{other.name}.{k}": v for k, v in other.values.items()})
        self.tables.update(other.tables)
        self.checks += [(f"{other.name}: {d}", ok) for d, ok in other.checks]


@dataclass
class Run:
    model: LanguageModel
    metrics: list  # (step, train_loss, heldout_ppl, wall_seconds)
    path: Path
    clip_fraction: float = 0.0


def read_metrics(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, loss, ppl, wall = line.split("\t")
        rows.append((int(s), float(loss), float(ppl), float(wall)))
    return rows


class Workspace:
    """Corpus, vocabulary and cached training runs below one directory."""

    def __init__(self, root, cfg: TrainConfig, arch: dict, progress: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.cfg = cfg
        self.arch = arch
        self.progress = progress or (lambda msg: None)
        self._data = None
        self._memo: dict = {}

    # -- data ---------------------------------------------------------------
    def data(self):
        """(vocab, encoded train sentences, encoded heldout sentences)."""
        if self._data is None:
            cfg = self.cfg
            if cfg.train_path:
                train = read_sentences(cfg.train_path)
                heldout = read_sentences(cfg.heldout_path) if cfg.heldout_path else []
            else:
                d = self.root / "data"
                paths = (d / f"{cfg.synthetic}-train.txt", d / f"{cfg.synthetic}-heldout.txt")
                if not all(p.exists() for p in paths):
                    if cfg.synthetic == "topics":
                        tr, he = train_heldout_split(cfg.train_tokens, cfg.heldout_tokens, cfg.corpus_seed)
                    else:  # a bigram chain is only ever judged on its own training text
                        tr = he = sharp_bigram_corpus(cfg.train_tokens, seed=cfg.corpus_seed)
                    d.mkdir(parents=True, exist_ok=True)
                    write_sentences(paths[0], tr)
                    write_sentences(paths[1], he)
                train, heldout = (read_sentences(p) for p in paths)
            vocab = build_vocab(train, self.cfg.vocab_size, self.cfg.min_count)
            self._data = (vocab, encode_corpus(vocab, train), encode_corpus(vocab, heldout))
        return self._data

    # -- runs ---------------------------------------------------------------
    def run(self, name: str, cfg_overrides: dict | None = None, base: str | None = None, **arch_overrides) -> Run:
        """Train (or reuse) one LSTM run; ``base`` names a run whose model is frozen under a new head."""
        vocab, train, heldout = self.data()
        cfg = dataclasses.replace(self.cfg, **(cfg_overrides or {}))
        arch = resolve_arch(self.arch, **arch_overrides)
        d = self.root / "runs" / name
        resolved = dump_config(cfg, arch) + (f"base_run={base}\n" if base else "")
        last = d / "checkpoints" / "last.ckpt"
        if last.exists() and (d / "config.resolved").exists() and (d / "config.resolved").read_text() == resolved:
            model, ck, step = ckpt_io.load(last, vocab)
            return Run(model, read_metrics(d / "metrics.log"), d, ck.header["train_state"]["clipped"] / max(step, 1))
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        (d / "config.resolved").write_text(resolved)
        model = LanguageModel(arch, vocab.words)
        if base is not None:
            model.load_base_from(self.run(base).model)
            cfg = dataclasses.replace(cfg, freeze=",".join(x for x in (cfg.freeze, "base") if x))
        self.progress(f"training {name} for {cfg.max_steps} steps")
        trainer = Trainer(model, vocab, train, heldout, cfg, d)
        res = trainer.run(lambda m: self.progress(f"{name} step {m[0]} loss {m[1]:.4f} ppl {m[2]:.3f}"))
        return Run(res.model, res.metrics, d, res.clip_fraction)

    def kn(self, order: int | None = None):
        vocab, train, _ = self.data()
        order = order or self.cfg.kn_order
        path = self.root / "runs" / f"kn{order}" / "model.ckpt"
        if path.exists():
            try:
                return ckpt_io.load_kn(path, vocab)[0]
            except ckpt_io.VocabularyMismatch:
                pass  # counted on a different corpus
        path.parent.mkdir(parents=True, exist_ok=True)
        self.progress(f"counting {order}-grams")
        model = train_kn(train, len(vocab), order)
        ckpt_io.save_kn(model, path, vocab)
        return model


# ----------------------------------------------------------------------------
# the experiments
# ----------------------------------------------------------------------------

def _steps_table(header: tuple[str, ...], runs: list[Run]) -> str:
    lines = ["\t".join(header)]
    for rows in zip(*(r.metrics for r in runs)):
        lines.append("\t".join([str(rows[0][0])] + [f"{r[2]:.4f}" for r in rows]))
    return "\n".join(lines) + "\n"


def nce_vs_is(ws: Workspace) -> RecipeResult:
    out = RecipeResult("nce-vs-is")
    is_run = ws.run("is", loss="is")
    nce_run = ws.run("nce", loss="nce")
    out.primary_run = is_run.path
    out.tables["nce_vs_is.tsv"] = _steps_table(("step", "is_ppl", "nce_ppl"), [is_run, nce_run])
    is_ppl = np.array([m[2] for m in is_run.metrics])
    nce_ppl = np.array([m[2] for m in nce_run.metrics])
    frac = float(np.mean(is_ppl <= nce_ppl))
    out.values.update(is_final_ppl=float(is_ppl[-1]), nce_final_ppl=float(nce_ppl[-1]), is_better_fraction=frac)
    out.check("IS perplexity <= NCE perplexity at the final checkpoint", is_ppl[-1] <= nce_ppl[-1])
    out.check("IS perplexity <= NCE perplexity at >= 80% of checkpoints", frac >= 0.8)
    return out


def lstm_vs_kn(ws: Workspace) -> RecipeResult:
    out = RecipeResult("lstm-vs-kn")
    vocab, _, heldout = ws.data()
    lstm = ws.run("is", loss="is")
    kn = ws.kn()
    out.primary_run = lstm.path
    lp_lstm = LMScorer(lstm.model)(heldout)
    lp_kn = KNScorer(kn)(heldout)
    ppl_lstm = math.exp(-lp_lstm.mean())
    ppl_kn = math.exp(-lp_kn.mean())
    table = bucket_deltas(targets_of(heldout), lp_lstm, lp_kn, vocab.counts, BUCKETS)
    out.tables["buckets.tsv"] = table.to_text()
    best = int(np.argmax(table.mean_delta))
    rare_start = BUCKETS - math.ceil(BUCKETS / 4)
    out.values.update(lstm_ppl=ppl_lstm, kn_ppl=ppl_kn, argmax_bucket=best, rarest_quartile_start=rare_start)
    out.check("LSTM perplexity < KN perplexity", ppl_lstm < ppl_kn)
    out.check("largest mean log-prob gain falls in the rarest quartile of buckets", best >= rare_start)
    return out


def _input_param_counts(arch: dict, V: int) -> tuple[int, int]:
    table = V * arch["embed_dim"]
    feats = sum(arch["features"])
    cnn = 259 * arch["char_dim"] + sum(w * arch["char_dim"] * f + f for w, f in zip(arch["widths"], arch["features"]))
    cnn += arch["n_highway"] * 2 * (feats * feats + feats) + feats * arch["embed_dim"] + arch["embed_dim"]
    return table, cnn


def charcnn_parity(ws: Workspace) -> RecipeResult:
    out = RecipeResult("charcnn-parity")
    vocab, _, heldout = ws.data()
    word = ws.run("is", loss="is")
    chars = ws.run("charcnn", loss="is", input="charcnn")
    out.primary_run = chars.path
    ppl_word = perplexity(LMScorer(word.model), heldout).perplexity
    ppl_char = perplexity(LMScorer(chars.model), heldout).perplexity
    n_word, n_char = word.model.input_parameter_count(), chars.model.input_parameter_count()
    exp_word, exp_char = _input_param_counts(word.model.arch, len(vocab))
    out.values.update(table_ppl=ppl_word, charcnn_ppl=ppl_char, ratio=ppl_char / ppl_word,
                      table_input_params=n_word, charcnn_input_params=n_char)
    out.check("char-CNN perplexity within 5% of the table model (or better)", ppl_char <= 1.05 * ppl_word)
    out.check("input parameter counts match the closed-form counts", (n_word, n_char) == (exp_word, exp_char))
    out.check("char-CNN input has strictly fewer parameters", n_char < n_word)
    return out


def _head_runs(ws: Workspace) -> dict[str, Run]:
    return {
        "full": ws.run("is", loss="is"),
        "cnn_corr": ws.run("cnn-corr", loss="is", head="cnn"),
        "cnn": ws.run("cnn-nocorr", loss="is", head="cnn", corr_dim=0),
        "char": _char_run(ws),
    }


def _char_run(ws: Workspace) -> Run:
    # the frozen base only runs forward, but each char-LSTM step is still ~3x a word-level step
    steps = max(1, ws.cfg.max_steps // 2)
    return ws.run("char-head", base="is", head="char", cfg_overrides={"eval_marginalize": False, "max_steps": steps})


def _head_slice(ws: Workspace):
    return heldout_slice(ws.data()[2], HEAD_EVAL_TOKENS)


def _char_scores(ws: Workspace, marginalize: bool) -> np.ndarray:
    key = ("char-head", marginalize)
    if key not in ws._memo:
        ws._memo[key] = LMScorer(_char_run(ws).model, marginalize=marginalize)(_head_slice(ws))
    return ws._memo[key]


def softmax_ordering(ws: Workspace) -> RecipeResult:
    out = RecipeResult("softmax-ordering")
    runs = _head_runs(ws)
    out.primary_run = runs["char"].path
    sl = _head_slice(ws)
    ppl = {k: perplexity(LMScorer(r.model), sl).perplexity for k, r in runs.items() if k != "char"}
    ppl["char"] = math.exp(-_char_scores(ws, True).mean())
    order = ["full", "cnn_corr", "cnn", "char"]
    lines = ["head\tperplexity\tgap_to_previous"]
    for i, k in enumerate(order):
        gap = ppl[k] - ppl[order[i - 1]] if i else 0.0
        lines.append(f"{k}\t{ppl[k]:.4f}\t{gap:.4f}")
        out.values[f"{k}_ppl"] = ppl[k]
    out.tables["heads.tsv"] = "\n".join(lines) + "\n"
    for a, b in zip(order, order[1:]):
        out.check(f"{a} <= {b}", ppl[a] <= ppl[b])
    return out


def char_marginalize(ws: Workspace) -> RecipeResult:
    out = RecipeResult("char-marginalize")
    run = _char_run(ws)
    out.primary_run = run.path
    raw, marg = _char_scores(ws, False), _char_scores(ws, True)
    ppl_raw, ppl_marg = math.exp(-raw.mean()), math.exp(-marg.mean())
    out.values.update(unnormalized_ppl=ppl_raw, marginalized_ppl=ppl_marg, min_gain=float((marg - raw).min()))
    out.check("marginalization never lowers an in-vocabulary probability", np.all(marg >= raw))
    out.check("marginalization strictly lowers heldout perplexity", ppl_marg < ppl_raw)
    return out


def ensemble(ws: Workspace) -> RecipeResult:
    out = RecipeResult("ensemble")
    _, _, heldout = ws.data()
    members = {"lstm": LMScorer(ws.run("is", loss="is").model),
               "charcnn": LMScorer(ws.run("charcnn", loss="is", input="charcnn").model),
               "kn": KNScorer(ws.kn())}
    half = len(heldout) // 2
    tune, test = heldout[:half], heldout[half:]
    L_tune = np.stack([m(tune) for m in members.values()])
    L_test = np.stack([m(test) for m in members.values()])
    save_cache(ws.root / "ensemble_tune.cache", L_tune, list(members))
    em = optimize_weights(L_tune)
    equal = np.full(len(members), 1.0 / len(members))
    eq_ppl, opt_ppl = perplexity_of(L_test, equal), perplexity_of(L_test, em.weights)
    out.values.update({f"weight_{k}": float(w) for k, w in zip(members, em.weights)})
    out.values.update(equal_ppl=eq_ppl, optimized_ppl=opt_ppl, em_iterations=em.iterations,
                      **{f"{k}_ppl": math.exp(-L_test[j].mean()) for j, k in enumerate(members)})
    out.tables["em_history.tsv"] = "iteration\tmean_logprob\n" + "".join(f"{i}\t{v:.10f}\n" for i, v in enumerate(em.history))
    out.check("EM log-likelihood never decreases", all(b >= a - 1e-12 for a, b in zip(em.history, em.history[1:])))
    out.check("tuned weights <= equal weights on the untouched heldout half", opt_ppl <= eq_ppl)
    return out


def tiny_bigram(ws: Workspace) -> RecipeResult:
    out = RecipeResult("tiny-bigram")
    vocab, train, _ = ws.data()
    run = ws.run("tiny")
    out.primary_run = run.path
    ppl = perplexity(LMScorer(run.model, marginalize=False), train).perplexity
    out.values.update(train_ppl=ppl, steps=run.metrics[-1][0], clip_fraction=run.clip_fraction)
    out.check("training perplexity < 5 within 5000 steps", ppl < 5 and run.metrics[-1][0] <= 5000)
    return out


@dataclass
class Recipe:
    name: str
    description: str
    fn: Callable[[Workspace], RecipeResult]
    defaults: dict = field(default_factory=dict)  # config overrides on top of the library defaults


DESK = {"seed": 0, "max_steps": 3000, "eval_every": 250, "eval_tokens": 10000, "patience": 0, "k": 256, "batch": 32}


RECIPES: dict[str, Recipe] = {}


def _register(*recipes: Recipe) -> None:
    for r in recipes:
        RECIPES[r.name] = r


_register(
    Recipe("nce-vs-is", "NCE and IS training of the same LSTM; heldout perplexity per checkpoint", nce_vs_is, DESK),
    Recipe("lstm-vs-kn", "LSTM against a 5-gram Kneser-Ney model, with frequency buckets", lstm_vs_kn, DESK),
    Recipe("charcnn-parity", "char-CNN input embeddings against a word table", charcnn_parity, DESK),
    Recipe("softmax-ordering", "full softmax, CNN softmax with and without correction, char-LSTM head", softmax_ordering, DESK),
    Recipe("char-marginalize", "effect of renormalizing the char head over the vocabulary", char_marginalize, DESK),
    Recipe("ensemble", "EM-tuned interpolation of two LSTMs and KN-5", ensemble, DESK),
    Recipe("tiny-bigram", "tiny LSTM on a 10k-token sharp bigram corpus", tiny_bigram,
           {"max_steps": 2000, "eval_every": 500, "eval_tokens": 0, "patience": 0, "batch": 16, "unroll": 10,
            "synthetic": "bigram", "train_tokens": 10000, "corpus_seed": 3, "loss": "full",
            "embed_dim": 16, "hidden_dim": 32, "proj_dim": 16, "dropout": 0.0}),
)

ALL = ["nce-vs-is", "lstm-vs-kn", "charcnn-parity", "softmax-ordering", "char-marginalize", "ensemble"]


def recipe_config(name: str, raw: dict | None = None, **overrides):
    """Resolved (cfg, arch) for a recipe: library defaults < recipe defaults < raw file < overrides."""
    if name != "all" and name not in RECIPES:
        raise KeyError(f"unknown recipe {name!r}; choose from {', '.join(sorted(RECIPES) + ['all'])}")
    defaults = DESK if name == "all" else RECIPES[name].defaults
    merged = {k: str(v) for k, v in defaults.items()}
    merged.update(raw or {})
    return resolve_config(merged, **overrides)


def run_recipe(name: str, out_dir, cfg: TrainConfig, arch: dict, progress=None, workspace=None) -> RecipeResult:
    """Run a recipe and write config.resolved, metrics.log, report.* and tables into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(dump_config(cfg, arch))
    ws_root = Path(workspace) if workspace else out_dir
    if name == "all":
        ws = Workspace(ws_root, cfg, arch, progress)
        result = RecipeResult("all")
        for n in ALL:
            sub = RECIPES[n].fn(ws)
            result.merge(sub)
            result.primary_run = result.primary_run or sub.primary_run
    else:
        result = RECIPES[name].fn(Workspace(ws_root, cfg, arch, progress))
    for fname, text in result.tables.items():
        (out_dir / fname).write_text(text)
    if result.primary_run is not None:
        src = Path(result.primary_run)
        if src.resolve() != out_dir.resolve():
            shutil.copyfile(src / "metrics.log", out_dir / "metrics.log")
            (out_dir / "checkpoints").mkdir(exist_ok=True)
            shutil.copyfile(src / "checkpoints" / "last.ckpt", out_dir / "checkpoints" / "last.ckpt")
    (out_dir / "report.txt").write_text(result.to_text())
    (out_dir / "report.kv").write_text(result.to_kv())
    return result


__all__ = ["Recipe", "RecipeResult", "RECIPES", "Workspace", "recipe_config", "run_recipe", "read_metrics", "Vocabulary"]

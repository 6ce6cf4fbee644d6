"""Training loop: truncated BPTT, clipping, Adagrad, evaluation and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import BatchStream, Vocabulary, target_mask
from .evaluation import LMScorer, perplexity
from .model import DEFAULT_ARCH, LanguageModel, NonFiniteLossError, resolve_arch
from .numeric import Adagrad, clip_global_norm, make_rng, rng_from_json, rng_state_json
from .recurrent import LSTMState

METRICS_HEADER = "step\ttrain_loss\theldout_ppl\twall_seconds"


@dataclass
class TrainConfig:
    lr: float = 0.2
    unroll: int = 20
    batch: int = 32
    clip: float = 1.0
    clip_scope: str = "lstm"  # "lstm" or "all"
    k: int = 256
    proposal: str = "unigram"  # or "uniform"
    max_steps: int = 1000
    epochs: float = 0.0  # > 0 caps training at this many passes over the data
    seed: int = 1
    freeze: str = ""  # comma list: "all", "base", "head" or parameter-name prefixes
    eval_every: int = 200
    eval_tokens: int = 10000  # heldout prefix used for periodic evaluation; 0 = all
    eval_marginalize: bool = True
    patience: int = 3  # stop after this many evals without improvement; 0 = never
    checkpoint_every: int = 0  # 0 = only at the end
    initial_accumulator: float = 0.1
    cnn_lr_scale: float = 0.1
    workers: int = 1
    wall_clock: bool = True  # false writes 0 in the wall_seconds column so metrics.log is fully deterministic
    model: str = "lstm"  # "lstm" or "kn"
    kn_order: int = 5
    # data; without paths, recipes generate a synthetic corpus of these sizes
    train_path: str = ""
    heldout_path: str = ""
    vocab_size: int = 10000
    min_count: int = 1
    synthetic: str = "topics"  # generator used when no train_path is given: "topics" or "bigram"
    corpus_seed: int = 11
    train_tokens: int = 1_000_000
    heldout_tokens: int = 50_000

    def validate(self) -> "TrainConfig":
        for name in ("unroll", "batch", "k", "workers", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "clip", "initial_accumulator", "cnn_lr_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.clip == 0:
            raise ValueError("clip must be positive (use inf to disable)")
        if self.clip_scope not in ("lstm", "all"):
            raise ValueError(f"clip_scope must be 'lstm' or 'all', got {self.clip_scope!r}")
        if self.proposal not in ("unigram", "uniform"):
            raise ValueError(f"proposal must be 'unigram' or 'uniform', got {self.proposal!r}")
        if self.synthetic not in ("topics", "bigram"):
            raise ValueError(f"synthetic must be 'topics' or 'bigram', got {self.synthetic!r}")
        if self.model not in ("lstm", "kn"):
            raise ValueError(f"model must be 'lstm' or 'kn', got {self.model!r}")
        if self.max_steps < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("step counts must be >= 0")
        return self


# ----------------------------------------------------------------------------
# key=value configuration files
# ----------------------------------------------------------------------------

def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(raw: dict[str, str] | None = None, **overrides) -> tuple[TrainConfig, dict]:
    """Split raw key=value strings into a TrainConfig and an architecture dict.

    Unknown keys are an error.  ``overrides`` are already-typed values.
    """
    cfg = TrainConfig()
    arch = copy.deepcopy(DEFAULT_ARCH)
    train_keys = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for k, v in (raw or {}).items():
        if k in train_keys:
            setattr(cfg, k, _parse_value(v, getattr(cfg, k), k))
        elif k in arch:
            arch[k] = _parse_value(v, arch[k], k)
        else:
            raise ValueError(f"unknown config key {k!r}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k in train_keys:
            setattr(cfg, k, v)
        elif k in arch:
            arch[k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    return cfg.validate(), resolve_arch(arch)


def load_config(path) -> tuple[TrainConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        return resolve_config(parse_config_text(fh.read()))


def dump_config(cfg: TrainConfig, arch: dict) -> str:
    items = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(TrainConfig)}
    items.update({k: v for k, v in arch.items() if k in DEFAULT_ARCH})
    return "".join(f"{k}={_format_value(items[k])}\n" for k in sorted(items))


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

class TrainingAborted(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainResult:
    model: LanguageModel
    step: int
    metrics: list = field(default_factory=list)  # (step, train_loss, heldout_ppl, wall)
    losses: list = field(default_factory=list)  # per-step training loss
    clip_fraction: float = 0.0
    stopped_early: bool = False


def frozen_names(model: LanguageModel, patterns: str) -> set[str]:
    names = set()
    base = {p.name for p in model.base_parameters()}
    head = {p.name for p in model.head_parameters()}
    for item in (s.strip() for s in patterns.split(",")):
        if not item:
            continue
        if item == "all":
            names |= base | head
        elif item == "base":
            names |= base
        elif item == "head":
            names |= head
        else:
            matched = {n for n in base | head if n.startswith(item)}
            if not matched:
                raise ValueError(f"freeze pattern {item!r} matches no parameter")
            names |= matched
    return names


def heldout_slice(sentences: Sequence[np.ndarray], tokens: int) -> list[np.ndarray]:
    """Leading sentences holding at least ``tokens`` targets (all if tokens <= 0)."""
    if tokens <= 0:
        return list(sentences)
    out, n = [], 0
    for s in sentences:
        if n >= tokens:
            break
        out.append(s)
        n += len(s) - 1
    return out


def evaluate(model: LanguageModel, sentences, marginalize: bool = True) -> float:
    return perplexity(LMScorer(model, marginalize=marginalize), sentences).perplexity


def _states_to_arrays(states) -> dict:
    out = {}
    for k, s in enumerate(states):
        out[f"state/{k}/c"] = s.c
        out[f"state/{k}/h"] = s.h
    return out


def _states_from_arrays(arrays, n_layers) -> list[LSTMState]:
    return [LSTMState(arrays[f"state/{k}/c"].copy(), arrays[f"state/{k}/h"].copy()) for k in range(n_layers)]


def _format_metrics(step, loss, ppl, wall) -> str:
    return f"{step}\t{loss:.8f}\t{ppl:.8f}\t{wall:.3f}"


class Trainer:
    """Owns the mutable training state so it can be checkpointed and resumed."""

    def __init__(self, model: LanguageModel, vocab: Vocabulary, train_sents, heldout_sents, cfg: TrainConfig, out_dir=None):
        if list(vocab.words) != model.words:
            raise ValueError("model and vocabulary disagree")
        self.model = model
        self.vocab = vocab
        self.cfg = cfg.validate()
        self.out_dir = Path(out_dir) if out_dir else None
        self.heldout = heldout_slice(heldout_sents, cfg.eval_tokens) if heldout_sents is not None else []
        self.stream = BatchStream(train_sents, cfg.batch, shuffle_seed=cfg.seed)
        self.rng = make_rng(cfg.seed)
        self.states = model.zero_state(cfg.batch)
        self.step = 0
        self.frozen = frozen_names(model, cfg.freeze)
        lr_scale = {}
        if model.arch["head"] == "cnn":
            lr_scale = {p.name: cfg.cnn_lr_scale for p in model.head_parameters()}
        self.opt = Adagrad(model.parameters(), cfg.lr, initial_accumulator=cfg.initial_accumulator, lr_scale=lr_scale, frozen=self.frozen)
        if cfg.lr == 0:
            self.opt.frozen = {p.name for p in model.parameters()}
        base = {p.name for p in model.base_parameters()}
        self.backprop_base = not base <= self.frozen
        if cfg.clip_scope == "lstm":
            self.clip_params = [p for p in model.stack.parameters() if p.name not in self.frozen]
        else:
            self.clip_params = [p for p in model.parameters() if p.name not in self.frozen]
        V = model.vocab_size
        self.pn = vocab.unigram(1e-9) if cfg.proposal == "unigram" else np.full(V, 1.0 / V)
        self.metrics: list = []
        self.losses: list = []
        self.window_losses: list = []
        self.clipped = 0
        self.best = math.inf
        self.bad_evals = 0
        self.wall_offset = 0.0
        self.stopped_early = False
        self._clones = None

    # -- state ---------------------------------------------------------------
    def train_state(self) -> dict:
        return {
            "rng": rng_state_json(self.rng),
            "stream": self.stream.state(),
            "window_losses": list(self.window_losses),
            "clipped": self.clipped,
            "best": self.best if math.isfinite(self.best) else None,
            "bad_evals": self.bad_evals,
            "wall": self.wall_offset + (time.perf_counter() - self._t0 if hasattr(self, "_t0") else 0.0),
            "n_losses": len(self.losses),
        }

    def save(self, path) -> None:
        arrays = _states_to_arrays(self.states)
        arrays["losses"] = np.array(self.losses, dtype=float)
        arrays["metrics"] = np.array(self.metrics, dtype=float).reshape(-1, 4)
        ckpt_io.save(self.model, path, self.vocab, self.step, self.train_state(), arrays)

    def restore(self, path) -> None:
        ck = ckpt_io.load_checkpoint(path, self.vocab)
        if ck.header["arch"] != self.model.arch:
            raise ValueError("checkpoint architecture differs from the configured one")
        named = self.model.named_parameters()
        for name, p in named.items():
            p.value[...] = ck.arrays[f"param/{name}"]
            p.accum[...] = ck.arrays[f"accum/{name}"]
        st = ck.header["train_state"]
        self.step = int(ck.header["step"])
        self.rng = rng_from_json(st["rng"])
        self.stream.set_state(st["stream"])
        self.states = _states_from_arrays(ck.arrays, len(self.model.stack.layers))
        self.window_losses = list(st["window_losses"])
        self.clipped = int(st["clipped"])
        self.best = math.inf if st["best"] is None else float(st["best"])
        self.bad_evals = int(st["bad_evals"])
        self.wall_offset = float(st["wall"])
        self.losses = ck.arrays["losses"].tolist()
        self.metrics = [(int(m[0]), float(m[1]), float(m[2]), float(m[3])) for m in ck.arrays["metrics"]]
        self._write_metrics()

    def _metrics_path(self):
        return self.out_dir / "metrics.log" if self.out_dir else None

    def _write_metrics(self):
        p = self._metrics_path()
        if p is None:
            return
        text = METRICS_HEADER + "\n" + "".join(_format_metrics(*m) + "\n" for m in self.metrics)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(text)
        os.replace(tmp, p)

    # -- one step ------------------------------------------------------------
    def _samples(self):
        if self.model.arch["loss"] == "full" or self.model.is_char_head:
            return None
        return self.rng.choice(self.model.vocab_size, size=self.cfg.k, replace=True, p=self.pn)

    def _forward_backward(self, inputs, targets, samples):
        if self.cfg.workers <= 1:
            # a frozen base runs in inference mode so its hidden states are reproducible
            loss, self.states = self.model.loss_and_grad(
                inputs, targets, self.states, training=self.backprop_base, rng=self.rng, samples=samples, pn=self.pn, backprop_base=self.backprop_base
            )
            return loss
        return self._parallel_forward_backward(inputs, targets, samples)

    def _parallel_forward_backward(self, inputs, targets, samples):
        """Shard the batch rows over cloned models that share parameter values.

        Shard gradients are summed in shard order, weighted by each shard's
        share of counted targets, so the result does not depend on timing.
        """
        W = min(self.cfg.workers, inputs.shape[0])
        if self._clones is None:
            self._clones = []
            for _ in range(W):
                c = copy.deepcopy(self.model)
                for pc, pm in zip(c.parameters(), self.model.parameters()):
                    pc.value = pm.value
                self._clones.append(c)
            self._pool = ThreadPoolExecutor(max_workers=W)
        shards = np.array_split(np.arange(inputs.shape[0]), W)
        seeds = self.rng.integers(0, 2**63 - 1, size=W)
        counts = [int(target_mask(targets[s]).sum()) for s in shards]
        total = sum(counts)

        def run(j):
            s = shards[j]
            if counts[j] == 0:
                return 0.0, [st.copy() for st in self._slice_states(s)]
            return self._clones[j].loss_and_grad(
                inputs[s], targets[s], self._slice_states(s), training=self.backprop_base, rng=make_rng(int(seeds[j])),
                samples=samples, pn=self.pn, backprop_base=self.backprop_base,
            )

        results = list(self._pool.map(run, range(W)))
        loss = 0.0
        for j, (shard_loss, _) in enumerate(results):
            w = counts[j] / total if total else 0.0
            loss += w * shard_loss
            for pm, pc in zip(self.model.parameters(), self._clones[j].parameters()):
                if w:
                    pm.grad += w * pc.grad
                pc.zero_grad()
        self.states = [LSTMState(np.concatenate([r[1][k].c for r in results]), np.concatenate([r[1][k].h for r in results]))
                       for k in range(len(self.states))]
        return loss

    def _slice_states(self, rows):
        return [LSTMState(s.c[rows], s.h[rows]) for s in self.states]

    def train_step(self) -> float:
        inputs, targets = self.stream.next_batch(self.cfg.unroll)
        samples = self._samples()
        try:
            loss = self._forward_backward(inputs, targets, samples)
        except NonFiniteLossError as err:
            raise TrainingAborted(self._dump_nan(err, inputs), self._dump_path) from err
        if self.clip_params and clip_global_norm(self.clip_params, self.cfg.clip) < 1.0:
            self.clipped += 1
        self.opt.step()
        self.step += 1
        self.losses.append(loss)
        self.window_losses.append(loss)
        return loss

    _dump_path = None

    def _dump_nan(self, err, inputs) -> str:
        cursors = (self.stream.cursors - self.cfg.unroll).tolist()
        msg = f"non-finite loss at step {self.step + 1}; batch stream cursors {cursors}"
        if self.out_dir:
            d = self.out_dir / "nan_dump"
            d.mkdir(parents=True, exist_ok=True)
            last = self.out_dir / "checkpoints" / "last.ckpt"
            lines = [f"step={self.step + 1}", f"stream_cursors={','.join(map(str, cursors))}",
                     f"unroll={self.cfg.unroll}", f"last_checkpoint={last if last.exists() else ''}", f"error={err}"]
            (d / "batch.txt").write_text("\n".join(lines) + "\n")
            np.save(d / "inputs.npy", inputs)
            self.save(d / "state.ckpt")
            self._dump_path = str(d)
            msg += f"; dump in {d}"
        return msg

    # -- loop ----------------------------------------------------------------
    def evaluate(self) -> float:
        if not self.heldout:
            return float("nan")
        return evaluate(self.model, self.heldout, self.cfg.eval_marginalize)

    def _log_eval(self):
        ppl = self.evaluate()
        loss = float(np.mean(self.window_losses)) if self.window_losses else float("nan")
        self.window_losses = []
        wall = self.wall_offset + time.perf_counter() - self._t0 if self.cfg.wall_clock else 0.0
        self.metrics.append((self.step, loss, ppl, wall))
        self._write_metrics()
        if ppl < self.best:
            self.best, self.bad_evals = ppl, 0
        else:
            self.bad_evals += 1

    def _checkpoint(self):
        if not self.out_dir:
            return
        d = self.out_dir / "checkpoints"
        d.mkdir(parents=True, exist_ok=True)
        self.save(d / f"step-{self.step:08d}.ckpt")
        self.save(d / "last.ckpt")

    def total_steps(self) -> int:
        steps = self.cfg.max_steps
        if self.cfg.epochs > 0:
            per_epoch = math.ceil(self.stream.epoch_length / self.cfg.unroll)
            steps = min(steps, int(math.ceil(self.cfg.epochs * per_epoch))) if steps else int(math.ceil(self.cfg.epochs * per_epoch))
        return steps

    def run(self, progress=None) -> TrainResult:
        self._t0 = time.perf_counter()
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if not self.metrics:
                self._write_metrics()
        total = self.total_steps()
        while self.step < total:
            self.train_step()
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                self._log_eval()
                if progress:
                    progress(self.metrics[-1])
                if self.cfg.patience and self.bad_evals >= self.cfg.patience:
                    self.stopped_early = True
                    break
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self._checkpoint()
        if not self.metrics or self.metrics[-1][0] != self.step:
            self._log_eval()
            if progress:
                progress(self.metrics[-1])
        self._checkpoint()
        if self._clones is not None:
            self._pool.shutdown()
        return TrainResult(self.model, self.step, list(self.metrics), list(self.losses),
                           self.clipped / max(self.step, 1), self.stopped_early)


def train(model: LanguageModel, vocab: Vocabulary, train_sents, heldout_sents, cfg: TrainConfig, out_dir=None,
          resume=None, progress=None) -> TrainResult:
    """next_batch -> BPTT -> clip -> Adagrad, with periodic heldout perplexity."""
    t = Trainer(model, vocab, train_sents, heldout_sents, cfg, out_dir)
    if resume is not None:
        t.restore(resume)
    return t.run(progress)


def with_new_head(base: LanguageModel, **arch_overrides) -> LanguageModel:
    """Copy of ``base`` (same embedder and LSTM weights) with a freshly initialized head."""
    arch = dict(base.arch)
    arch.pop("vocab_size", None)
    arch.update(arch_overrides)
    model = LanguageModel(arch, base.words)
    model.load_base_from(base)
    return model


def train_char_head(base_checkpoint, vocab: Vocabulary, train_sents, heldout_sents, cfg: TrainConfig, out_dir=None,
                    progress=None, **head_arch) -> TrainResult:
    """Freeze a trained word-level model and fit a char-LSTM head on top of it."""
    if not Path(base_checkpoint).exists():
        raise FileNotFoundError(f"base checkpoint {base_checkpoint} does not exist")
    base, _, _ = ckpt_io.load(base_checkpoint, vocab)
    model = with_new_head(base, head="char", **head_arch)
    frozen = "base" if not cfg.freeze else cfg.freeze + ",base"
    cfg = dataclasses.replace(cfg, freeze=frozen)
    return train(model, vocab, train_sents, heldout_sents, cfg, out_dir, progress=progress)

"""Command-line entry point: ``lmkit <command> [options]``.

Every failure prints a single line ``lmkit: error: <kind>: <message>`` to
stderr and exits nonzero (2 for usage errors, 3 for failed recipe checks, 1
otherwise).  Arguments, files and configuration are validated before any
training or scoring starts.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .corpus import Vocabulary, encode_corpus, read_sentences, write_sentences
from .embeddings import nearest_neighbors
from .ensemble import load_cache, optimize_weights, perplexity_of, save_cache
from .evaluation import (
    KNScorer,
    LMScorer,
    UniformScorer,
    bucket_compare,
    perplexity,
    sample_sentences,
)
from .gradsuite import SUITE, TOLERANCE, run_suite
from .model import LanguageModel
from .ngram import train_kn
from .recipes import ALL, RECIPES, Workspace, recipe_config, run_recipe
from .synthetic import sharp_bigram_corpus, train_heldout_split
from .trainer import (
    METRICS_HEADER,
    Trainer,
    TrainingAborted,
    dump_config,
    parse_config_text,
    resolve_config,
)


class UsageError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError("missing-file", f"{what} {path} does not exist", 2)
    return p


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return parse_config_text(_need_file(path, "config").read_text(encoding="utf-8"))
    except ValueError as e:
        raise CommandError("config", f"{path}: {e}", 2) from None


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_args(d: Path | None, args, skip=("func", "command", "config", "out")) -> None:
    """Record the resolved options of a non-training command as key=value lines."""
    if d is None:
        return
    items = {k: v for k, v in vars(args).items() if k not in skip and not k.startswith("_")}
    (d / "config.resolved").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in sorted(items.items())))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(map(str, v))
    return str(v)


def _load_scorer(path, vocab: Vocabulary | None = None, marginalize: bool = True, reset: bool = False):
    """(scorer, vocabulary, model) for an LSTM or KN checkpoint."""
    try:
        kind = ckpt_io.peek_kind(_need_file(path, "model"))
        if kind == "kn":
            model, v = ckpt_io.load_kn(path, vocab)
            return KNScorer(model), v, model
        model, ck, _ = ckpt_io.load(path, vocab)
        return LMScorer(model, reset_per_sentence=reset, marginalize=marginalize), ckpt_io.vocab_of(ck), model
    except ckpt_io.CheckpointError as e:
        raise CommandError("checkpoint", str(e)) from None


def _encode_file(vocab: Vocabulary, path):
    return encode_corpus(vocab, read_sentences(_need_file(path, "data")))


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_make_corpus(args):
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    if args.kind == "topics":
        tr, he = train_heldout_split(args.train_tokens, args.heldout_tokens, args.seed)
    else:
        tr = sharp_bigram_corpus(args.train_tokens, seed=args.seed)
        he = sharp_bigram_corpus(args.heldout_tokens, seed=args.seed)
    write_sentences(d / "train.txt", tr)
    write_sentences(d / "heldout.txt", he)
    _write_args(d, args)
    print(f"wrote {sum(len(s) + 1 for s in tr)} training and {sum(len(s) + 1 for s in he)} heldout tokens to {d}")


def _train_config(args):
    raw = _read_config(args.config)
    raw.update(_parse_sets(args.set))
    overrides = dict(seed=args.seed, workers=args.workers, train_path=args.train, heldout_path=args.heldout)
    try:
        return resolve_config(raw, **overrides)
    except ValueError as e:
        raise CommandError("config", str(e), 2) from None


def cmd_train(args):
    cfg, arch = _train_config(args)
    for p, what in ((cfg.train_path, "training corpus"), (cfg.heldout_path, "heldout corpus"),
                    (args.resume, "resume checkpoint"), (args.base, "base checkpoint")):
        if p:
            _need_file(p, what)
    if args.base and cfg.model != "lstm":
        raise CommandError("config", "--base only applies to model=lstm", 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg, arch))

    vocab, train, heldout = Workspace(out, cfg, arch).data()
    vocab.save(out / "vocab.txt")
    if cfg.model == "kn":
        t0 = time.perf_counter()
        model = train_kn(train, len(vocab), cfg.kn_order)
        (out / "checkpoints").mkdir(exist_ok=True)
        ckpt_io.save_kn(model, out / "checkpoints" / "last.ckpt", vocab)
        rep = perplexity(KNScorer(model), heldout) if heldout else None
        ppl = rep.perplexity if rep else float("nan")
        wall = time.perf_counter() - t0 if cfg.wall_clock else 0.0
        (out / "metrics.log").write_text(f"{METRICS_HEADER}\n0\tnan\t{ppl:.8f}\t{wall:.3f}\n")
        lines = [f"model kn{cfg.kn_order}", f"ngrams {','.join(map(str, model.num_ngrams()))}", f"heldout_ppl {ppl:.3f}"]
    else:
        model = LanguageModel(arch, vocab.words)
        if args.base:
            base = _load_scorer(args.base, vocab)[2]
            if not isinstance(base, LanguageModel):
                raise CommandError("config", "--base must be an LSTM checkpoint", 2)
            try:
                model.load_base_from(base)
            except ValueError as e:
                raise CommandError("config", f"base checkpoint does not fit this architecture: {e}", 2) from None
            cfg = dataclasses.replace(cfg, freeze=",".join(x for x in (cfg.freeze, "base") if x))
        trainer = Trainer(model, vocab, train, heldout, cfg, out)
        if args.resume:
            try:
                trainer.restore(args.resume)
            except (ckpt_io.CheckpointError, ValueError) as e:
                raise CommandError("checkpoint", str(e)) from None
        progress = None if args.quiet else (lambda m: print(f"step {m[0]} train_loss {m[1]:.4f} heldout_ppl {m[2]:.3f}", flush=True))
        try:
            res = trainer.run(progress)
        except TrainingAborted as e:
            raise CommandError("training-aborted", str(e)) from None
        step, loss, ppl, _ = res.metrics[-1]
        lines = [f"steps {step}", f"train_loss {loss:.6f}", f"heldout_ppl {ppl:.3f}",
                 f"clip_fraction {res.clip_fraction:.4f}", f"stopped_early {str(res.stopped_early).lower()}",
                 f"parameters {model.num_parameters()}"]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "report.kv").write_text("".join(ln.replace(" ", "=", 1) + "\n" for ln in lines))
    print("\n".join(lines))


def cmd_eval(args):
    if args.model == "uniform":
        if args.vocab is None and args.vocab_size is None:
            raise UsageError("--model uniform needs --vocab or --vocab-size")
        vocab = Vocabulary.load(_need_file(args.vocab, "vocabulary")) if args.vocab else None
        data = _need_file(args.data, "data")
        size = args.vocab_size or len(vocab)
        sents = read_sentences(data)
        if vocab is None:  # only the token count matters to a uniform model
            vocab = Vocabulary(["<UNK>", "<S>", "</S>"], [0, 0, 0])
        scorer = UniformScorer(size)
        encoded = encode_corpus(vocab, sents)
    else:
        vocab = Vocabulary.load(_need_file(args.vocab, "vocabulary")) if args.vocab else None
        _need_file(args.data, "data")
        scorer, vocab, _ = _load_scorer(args.model, vocab, marginalize=not args.no_marginalize, reset=args.reset_per_sentence)
        encoded = _encode_file(vocab, args.data)
    rep = perplexity(scorer, encoded)
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(rep.to_text())
        (d / "report.kv").write_text(rep.to_kv())
    print(f"perplexity {rep.perplexity:.3f}")
    print(f"tokens {rep.tokens}")


def cmd_sample(args):
    if args.count < 1 or args.max_len < 1:
        raise UsageError("--count and --max-len must be >= 1")
    if args.temperature < 0:
        raise UsageError("--temperature must be >= 0")
    scorer, vocab, model = _load_scorer(args.model)
    if not isinstance(model, LanguageModel):
        raise CommandError("unsupported", "sampling needs an LSTM checkpoint")
    sents = sample_sentences(model, args.count, args.max_len, args.temperature, args.seed)
    text = "".join(" ".join(vocab.decode(s)) + "\n" for s in sents)
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_nn(args):
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    _, vocab, model = _load_scorer(args.model)
    if not isinstance(model, LanguageModel):
        raise CommandError("unsupported", "nearest neighbours need an LSTM checkpoint")
    if args.side == "softmax" or (args.side == "auto" and model.arch["input"] != "charcnn"):
        if model.arch["head"] != "cnn":
            raise CommandError("unsupported", "model has neither a char-CNN input nor a CNN softmax")
        embedder = model.head.cnn
    else:
        if model.arch["input"] != "charcnn":
            raise CommandError("unsupported", "model has no char-CNN input embedder")
        embedder = model.embedder
    if args.candidates:
        cands = [w for s in read_sentences(_need_file(args.candidates, "candidate list")) for w in s]
    else:
        cands = [w for w in vocab.words[3:]]
    cands = [w for w in dict.fromkeys(cands) if w != args.query]
    rows = nearest_neighbors(embedder, args.query, args.k, cands)
    text = "word\tcosine\n" + "".join(f"{w}\t{s:.6f}\n" for w, s in rows)
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_buckets(args):
    if args.buckets < 1:
        raise UsageError("--buckets must be >= 1")
    _need_file(args.data, "data")
    a, vocab, _ = _load_scorer(args.model_a)
    b, _, _ = _load_scorer(args.model_b, vocab)
    sents = _encode_file(vocab, args.data)
    try:
        table = bucket_compare(a, b, sents, vocab.counts, args.buckets, args.by)
    except ValueError as e:
        raise CommandError("data", str(e)) from None
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(table.to_text())
    sys.stdout.write(table.to_text())


def cmd_ensemble(args):
    if args.from_cache:
        L, names = load_cache(_need_file(args.from_cache, "score cache"))
    else:
        paths = [p for p in args.models.split(",") if p] if args.models else []
        if not paths:
            raise UsageError("give --models A,B,.. or --from-cache FILE")
        _need_file(args.data, "data")
        for p in paths:
            _need_file(p, "model")
        scorers, vocab = [], None
        for p in paths:
            s, v, _ = _load_scorer(p, vocab)
            vocab = vocab or v
            scorers.append(s)
        sents = _encode_file(vocab, args.data)
        L = np.stack([s(sents) for s in scorers])
        names = [Path(p).stem if Path(p).stem != "last" else Path(p).parent.parent.name for p in paths]
        if args.cache:
            save_cache(args.cache, L, names)
    J = L.shape[0]
    equal = np.full(J, 1.0 / J)
    lines = [f"member {n} perplexity {math.exp(-L[j].mean()):.3f}" for j, n in enumerate(names)]
    lines.append(f"equal_weights perplexity {perplexity_of(L, equal):.3f}")
    if J >= 2:
        em = optimize_weights(L, max_iter=args.max_iter)
        lines.append(f"optimized_weights {' '.join(f'{w:.6f}' for w in em.weights)}")
        lines.append(f"optimized perplexity {perplexity_of(L, em.weights):.3f}")
        lines.append(f"em_iterations {em.iterations}")
    text = "\n".join(lines) + "\n"
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_gradcheck(args):
    names = [n for n in args.only.split(",") if n] if args.only else None
    if names:
        unknown = [n for n in names if n not in SUITE]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {','.join(SUITE)}")
    t0 = time.perf_counter()
    errs = run_suite(args.seed, names)
    text = "check\tmax_rel_error\n" + "".join(f"{n}\t{e:.3e}\n" for n, e in errs.items())
    text += f"total_seconds\t{time.perf_counter() - t0:.1f}\n"
    d = _out_dir(args)
    _write_args(d, args)
    if d is not None:
        (d / "report.txt").write_text(text)
    sys.stdout.write(text)
    worst = max(errs, key=errs.get)
    if errs[worst] >= TOLERANCE:
        raise CommandError("gradcheck-failed", f"{worst} max relative error {errs[worst]:.3e} >= {TOLERANCE:g}")


def cmd_recipe(args):
    if args.action == "list":
        for name in sorted(RECIPES):
            print(f"{name}\t{RECIPES[name].description}")
        print(f"all\tevery desk-scale recipe ({', '.join(ALL)}) in one workspace")
        return
    if not args.name:
        raise UsageError("recipe run needs a recipe name")
    if args.out is None:
        raise UsageError("recipe run needs --out")
    raw = _read_config(args.config)
    raw.update(_parse_sets(args.set))
    try:
        cfg, arch = recipe_config(args.name, raw, seed=args.seed, workers=args.workers)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    except ValueError as e:
        raise CommandError("config", str(e), 2) from None
    progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    result = run_recipe(args.name, args.out, cfg, arch, progress, args.workspace)
    sys.stdout.write(result.to_text())
    for fname, table in result.tables.items():
        sys.stdout.write(f"# {fname}\n{table}")
    if not result.passed:
        failed = [d for d, ok in result.checks if not ok]
        raise CommandError("check-failed", "; ".join(failed), 3)


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--workers", type=int, help="threads for intra-step data parallelism")
    common.add_argument("--out", help="output directory")

    p = _Parser(prog="lmkit", description="Desk-scale LSTM and n-gram language modeling toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("make-corpus", parents=[common], help="write a synthetic train/heldout corpus")
    s.add_argument("--kind", choices=("topics", "bigram"), default="topics")
    s.add_argument("--train-tokens", type=int, default=1_000_000)
    s.add_argument("--heldout-tokens", type=int, default=50_000)
    s.set_defaults(func=cmd_make_corpus, seed=11)

    s = sub.add_parser("train", parents=[common], help="train an LSTM or KN model")
    s.add_argument("--train", help="training corpus, one sentence per line")
    s.add_argument("--heldout", help="heldout corpus")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    s.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    s.add_argument("--base", help="freeze this checkpoint's embedder and LSTM under a new head")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="heldout perplexity")
    s.add_argument("--model", required=True, help="checkpoint path, or 'uniform'")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", help="vocabulary file (word<TAB>count per line)")
    s.add_argument("--vocab-size", type=int, help="outcome count of the uniform model")
    s.add_argument("--reset-per-sentence", action="store_true")
    s.add_argument("--no-marginalize", action="store_true", help="score a char head without renormalizing")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", parents=[common], help="draw sentences from an LSTM")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--max-len", type=int, default=40)
    s.add_argument("--temperature", type=float, default=1.0)
    s.set_defaults(func=cmd_sample, seed=0)

    s = sub.add_parser("nn", parents=[common], help="nearest neighbours under a char-CNN")
    s.add_argument("--model", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--candidates", help="file of candidate words (default: the model vocabulary)")
    s.add_argument("--side", choices=("auto", "input", "softmax"), default="auto")
    s.set_defaults(func=cmd_nn)

    s = sub.add_parser("buckets", parents=[common], help="mean log-prob difference by word frequency")
    s.add_argument("--model-a", required=True)
    s.add_argument("--model-b", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--buckets", type=int, default=25)
    s.add_argument("--by", choices=("tokens", "types"), default="tokens")
    s.set_defaults(func=cmd_buckets)

    s = sub.add_parser("ensemble", parents=[common], help="interpolate models, equal and EM-tuned weights")
    s.add_argument("--models", help="comma-separated checkpoints")
    s.add_argument("--data")
    s.add_argument("--cache", help="write per-token member scores here")
    s.add_argument("--from-cache", help="read member scores instead of scoring")
    s.add_argument("--max-iter", type=int, default=200)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--only", help=f"comma-separated subset of: {','.join(SUITE)}")
    s.set_defaults(func=cmd_gradcheck, seed=0)

    s = sub.add_parser("recipe", parents=[common], help="list or run named experiments")
    s.add_argument("action", choices=("list", "run"))
    s.add_argument("name", nargs="?")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--workspace", help="directory holding cached runs shared between recipes (default: --out)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_recipe)
    return p


_SHARED = {"config", "seed", "workers", "out", "set", "func", "command"}


def _apply_config_defaults(parser, sub, argv):
    """For commands other than train/recipe, --config supplies option defaults."""
    # a full pre-parse would trip over options the config file is about to supply
    command = argv[0] if argv and argv[0] in sub.choices else None
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    if command in (None, "train", "recipe") or not config:
        return
    pre = argparse.Namespace(command=command, config=config)
    raw = _read_config(pre.config)
    dests = {a.dest: a for a in sub.choices[pre.command]._actions}
    defaults = {}
    for k, v in raw.items():
        a = dests.get(k)
        if a is None or k in _SHARED:
            raise CommandError("config", f"{pre.config}: key {k!r} is not an option of {pre.command}", 2)
        if a.nargs == 0:
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif v == "":
            defaults[k] = None
        else:
            try:
                defaults[k] = a.type(v) if a.type else v
            except ValueError:
                raise CommandError("config", f"{pre.config}: cannot parse {k}={v!r}", 2) from None
        a.required = False
    sub.choices[pre.command].set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    try:
        _apply_config_defaults(parser, sub, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            raise UsageError("no command given")
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.command in ("train",) and args.out is None:
            raise UsageError("train needs --out")
        args.func(args)
        return 0
    except UsageError as e:
        print(f"lmkit: error: usage: {e}", file=sys.stderr)
        return 2
    except CommandError as e:
        print(f"lmkit: error: {e.kind}: {e}", file=sys.stderr)
        return e.code
    except (ValueError, FloatingPointError, OSError) as e:
        print(f"lmkit: error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import dataclasses
import math

import numpy as np
import pytest

from lmkit import checkpoint as ck
from lmkit.model import LanguageModel
from lmkit.trainer import (
    METRICS_HEADER,
    Trainer,
    TrainingAborted,
    dump_config,
    parse_config_text,
    resolve_config,
    train,
    train_char_head,
)

TINY = dict(embed_dim=8, hidden_dim=16, proj_dim=8, dropout=0.0, loss="full")


def _setup(bigram_data, arch=None, **cfg_kw):
    vocab, sents = bigram_data
    base = dict(batch=4, unroll=5, max_steps=10, eval_every=5, eval_tokens=200, patience=0, k=8)
    base.update(cfg_kw)
    cfg, a = resolve_config(None, **{**TINY, **(arch or {}), **base})
    return LanguageModel(a, vocab.words), vocab, sents[:300], sents[300:], cfg


def _snapshot(model):
    return [p.value.copy() for p in model.parameters()]


def test_zero_learning_rate_changes_nothing(bigram_data):
    model, vocab, tr, he, cfg = _setup(bigram_data, lr=0.0)
    before = _snapshot(model)
    train(model, vocab, tr, he, cfg)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.parameters()))


def test_freeze_all_changes_nothing(bigram_data):
    model, vocab, tr, he, cfg = _setup(bigram_data, freeze="all", arch=dict(loss="is"))
    before = _snapshot(model)
    train(model, vocab, tr, he, cfg)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.parameters()))


def test_first_loss_does_not_depend_on_clipping(bigram_data):
    losses = []
    for clip in (math.inf, 1.0, 1e-3):
        model, vocab, tr, he, cfg = _setup(bigram_data, clip=clip, max_steps=1)
        losses.append(Trainer(model, vocab, tr, he, cfg).train_step())
    assert losses[0] == losses[1] == losses[2]


def test_clipping_only_touches_the_lstm_by_default(bigram_data):
    model, vocab, tr, he, cfg = _setup(bigram_data, clip=1e-6, max_steps=1)
    t = Trainer(model, vocab, tr, he, cfg)
    assert {p.name for p in t.clip_params} == {p.name for p in model.stack.parameters()}
    t.train_step()
    assert t.clipped == 1


def test_tiny_bigram_is_learned(bigram_data):
    model, vocab, tr, he, cfg = _setup(bigram_data, max_steps=400, eval_every=0, batch=16, unroll=10, eval_tokens=0)
    res = train(model, vocab, tr, tr[:100], cfg)
    assert res.metrics[-1][2] < 5.0


def test_resume_matches_uninterrupted_run(bigram_data, tmp_path):
    kw = dict(max_steps=20, checkpoint_every=10, wall_clock=False, arch=dict(loss="is", dropout=0.2))
    model, vocab, tr, he, cfg = _setup(bigram_data, **kw)
    train(model, vocab, tr, he, cfg, tmp_path / "a")
    full = _snapshot(model)

    model2, _, _, _, _ = _setup(bigram_data, **kw)
    t = Trainer(model2, vocab, tr, he, cfg, tmp_path / "b")
    t.restore(tmp_path / "a" / "checkpoints" / "step-00000010.ckpt")
    t.run()
    assert all(np.array_equal(a, p.value) for a, p in zip(full, model2.parameters()))
    a_log = (tmp_path / "a" / "metrics.log").read_text()
    assert a_log == (tmp_path / "b" / "metrics.log").read_text()
    assert a_log.splitlines()[0] == METRICS_HEADER and len(a_log.splitlines()) == 5


def test_same_config_gives_identical_metrics(bigram_data, tmp_path):
    for d in ("x", "y"):
        model, vocab, tr, he, cfg = _setup(bigram_data, arch=dict(loss="nce", dropout=0.1))
        train(model, vocab, tr, he, cfg, tmp_path / d)
    cols = [[line.split("\t")[:3] for line in (tmp_path / d / "metrics.log").read_text().splitlines()] for d in "xy"]
    assert cols[0] == cols[1]


def test_parallel_workers_are_deterministic_and_match_serial(bigram_data):
    results = []
    for workers in (2, 2, 1):
        model, vocab, tr, he, cfg = _setup(bigram_data, workers=workers, max_steps=5)
        train(model, vocab, tr, he, cfg)
        results.append(_snapshot(model))
    assert all(np.array_equal(a, b) for a, b in zip(results[0], results[1]))
    assert all(np.allclose(a, b, rtol=1e-9, atol=1e-12) for a, b in zip(results[0], results[2]))


def test_nan_aborts_with_dump(bigram_data, tmp_path):
    model, vocab, tr, he, cfg = _setup(bigram_data)
    model.parameters()[0].value[:] = np.nan
    with pytest.raises(TrainingAborted, match="non-finite loss at step 1") as ei:
        train(model, vocab, tr, he, cfg, tmp_path)
    dump = tmp_path / "nan_dump"
    assert ei.value.dump_path == str(dump)
    assert (dump / "inputs.npy").exists() and (dump / "state.ckpt").exists()
    assert "stream_cursors=" in (dump / "batch.txt").read_text()


def test_patience_stops_early(bigram_data):
    model, vocab, tr, he, cfg = _setup(bigram_data, lr=0.0, patience=2, max_steps=50)
    res = train(model, vocab, tr, he, cfg)
    # the first eval sets the best value and two more without improvement stop the run
    assert res.stopped_early and res.step == 15


def test_config_round_trip_and_errors(bigram_data):
    cfg, arch = resolve_config({"lr": "0.5", "hidden_dim": "64", "widths": "1,2", "features": "3,4", "wall_clock": "false"})
    text = dump_config(cfg, arch)
    cfg2, arch2 = resolve_config(parse_config_text(text))
    assert cfg2 == cfg and arch2 == arch and dump_config(cfg2, arch2) == text
    assert cfg.lr == 0.5 and arch["hidden_dim"] == 64 and arch["widths"] == [1, 2] and not cfg.wall_clock
    with pytest.raises(ValueError, match="unknown config key 'lrr'"):
        resolve_config({"lrr": "1"})
    with pytest.raises(ValueError, match="cannot parse"):
        resolve_config({"batch": "many"})
    with pytest.raises(ValueError, match="clip_scope"):
        resolve_config({"clip_scope": "head"})
    with pytest.raises(ValueError, match="batch"):
        resolve_config(batch=0)
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("lr 0.2")
    with pytest.raises(ValueError, match="matches no parameter"):
        Trainer(*_setup(bigram_data, freeze="nosuch"))


def test_char_head_training_keeps_the_base_fixed(bigram_data, tmp_path):
    model, vocab, tr, he, cfg = _setup(bigram_data, max_steps=3)
    train(model, vocab, tr, he, cfg, tmp_path / "base")
    base_ckpt = tmp_path / "base" / "checkpoints" / "last.ckpt"
    head_cfg = dataclasses.replace(cfg, max_steps=3, eval_marginalize=False)
    res = train_char_head(base_ckpt, vocab, tr, he, head_cfg, char_head_dim=4, char_head_hidden=8, char_head_proj=4)
    base, _, _ = ck.load(base_ckpt)
    named = res.model.named_parameters()
    for p in base.base_parameters():
        np.testing.assert_array_equal(named[p.name].value, p.value)
    head = res.model.head_parameters()
    assert head and res.model.arch["head"] == "char"
    with pytest.raises(FileNotFoundError):
        train_char_head(tmp_path / "missing.ckpt", vocab, tr, he, head_cfg)

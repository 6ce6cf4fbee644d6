import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmkit.corpus import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    BatchStream,
    CharCodec,
    Vocabulary,
    build_vocab,
    encode_corpus,
    flatten_stream,
    read_sentences,
    target_mask,
    write_sentences,
)


def test_vocab_order_counts_and_unk():
    v = build_vocab([["b", "a", "b"], ["c", "b", "a"]], max_size=5)
    assert v.words == ["<UNK>", "<S>", "</S>", "b", "a"]
    assert v.counts.tolist() == [1, 2, 2, 3, 2]
    assert v.lookup("c") == UNK_ID
    np.testing.assert_array_equal(v.encode_sentence(["a", "zzz"]), [BOS_ID, 4, UNK_ID, EOS_ID])


def test_vocab_min_count():
    v = build_vocab([["a", "a", "b"]], min_count=2)
    assert "b" not in v and "a" in v


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([["x", "y", "x"]])
    v.save(tmp_path / "v.txt")
    w = Vocabulary.load(tmp_path / "v.txt")
    assert w.words == v.words and w.digest() == v.digest()


def test_vocab_rejects_bad_input():
    with pytest.raises(ValueError):
        build_vocab([])
    with pytest.raises(ValueError):
        Vocabulary(["a", "<S>", "</S>"], [1, 1, 1])
    with pytest.raises(ValueError):
        Vocabulary.loads("<UNK>\t0\n<S>\t1\n</S>\nfoo")


def test_unigram_is_a_distribution():
    v = build_vocab([["a", "a", "b"]])
    p = v.unigram()
    assert p.sum() == pytest.approx(1.0) and (p > 0).all()


def test_read_write_sentences(tmp_path):
    write_sentences(tmp_path / "c.txt", [["a", "b"], ["c"]])
    (tmp_path / "c.txt").write_text((tmp_path / "c.txt").read_text() + "\n   \n")
    assert read_sentences(tmp_path / "c.txt") == [["a", "b"], ["c"]]


@given(st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=6))
def test_char_codec_layout(word):
    codec = CharCodec(16)
    code = codec.encode(word)
    raw = word.encode("utf-8")[:14]
    assert code.shape == (16,) and code[0] == CharCodec.BOW
    assert code[1 + len(raw)] == CharCodec.EOW
    assert (code[2 + len(raw):] == CharCodec.PAD).all()
    assert bytes(code[1: 1 + len(raw)].astype(np.uint8)) == raw


def test_char_codec_truncates_long_words():
    code = CharCodec(5).encode("abcdefgh")
    assert CharCodec(5).decode(code) == "abc"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(0, 1000))
def test_batch_stream_covers_each_stream_in_order(B, T, seed):
    rng = np.random.default_rng(seed)
    sents = [np.r_[BOS_ID, rng.integers(3, 9, size=rng.integers(1, 5)), EOS_ID] for _ in range(3 * B)]
    bs = BatchStream(sents, B, shuffle_seed=seed)
    # concatenating the windows of stream b reproduces its token sequence
    steps = 3
    seen = [[] for _ in range(B)]
    for _ in range(steps):
        inp, tgt = bs.next_batch(T)
        np.testing.assert_array_equal(inp[:, 1:], tgt[:, :-1])
        for b in range(B):
            seen[b].extend(inp[b].tolist())
    for b in range(B):
        stream = bs.streams[b]
        expect = stream[np.arange(steps * T) % len(stream)]
        assert seen[b] == expect.tolist()
    # every sentence lands in exactly one stream
    assigned = np.sort(np.concatenate(bs.assignment))
    np.testing.assert_array_equal(assigned, np.arange(len(sents)))


def test_batch_stream_state_round_trip():
    sents = [np.array([1, 3, 4, 2]), np.array([1, 5, 2]), np.array([1, 3, 2])]
    a = BatchStream(sents, 2, shuffle_seed=0)
    a.next_batch(3)
    b = BatchStream(sents, 2, shuffle_seed=0)
    b.set_state(a.state())
    for x, y in zip(a.next_batch(4), b.next_batch(4)):
        np.testing.assert_array_equal(x, y)


def test_batch_stream_needs_tokens():
    with pytest.raises(ValueError):
        BatchStream([np.array([1, 2])], 2)


def test_flatten_and_mask():
    v = build_vocab([["a"]])
    enc = encode_corpus(v, [["a"], ["a", "a"]])
    inputs, targets = flatten_stream(enc)
    assert inputs[0] == BOS_ID and targets[-1] == EOS_ID
    assert target_mask(targets).sum() == 5  # a </S> a a </S>

import numpy as np
import pytest

from lmkit.corpus import CharCodec
from lmkit.embeddings import (
    CharCNNEmbedder,
    Highway,
    WordEmbeddingTable,
    cosine_similarity,
    nearest_neighbors,
)
from lmkit.numeric import ShapeError, make_rng


def test_table_lookup_and_scatter_grad():
    t = WordEmbeddingTable(5, 3, make_rng(0))
    ids = np.array([[1, 1], [4, 0]])
    out, cache = t.forward(ids)
    np.testing.assert_array_equal(out[0, 1], t.E.value[1])
    t.backward(cache, np.ones((2, 2, 3)))
    g = t.E.grad
    np.testing.assert_array_equal(g[1], 2.0)
    np.testing.assert_array_equal(g[2], 0.0)


def test_highway_with_closed_transform_gate_is_identity():
    hw = Highway(4, make_rng(0), carry_bias=-1e3)
    x = np.random.default_rng(0).normal(size=(3, 4))
    y, _ = hw.forward(x)
    np.testing.assert_allclose(y, x, atol=1e-12)


def expected_cnn_params(out_dim, char_dim, widths, features, n_highway, out_bias=True):
    nf = sum(features)
    conv = sum(w * char_dim * f + f for w, f in zip(widths, features))
    return 259 * char_dim + conv + n_highway * 2 * (nf * nf + nf) + nf * out_dim + (out_dim if out_bias else 0)


@pytest.mark.parametrize("out_bias", [True, False])
def test_parameter_count_closed_form(out_bias):
    cnn = CharCNNEmbedder(128, out_bias=out_bias, rng=make_rng(0))
    assert cnn.num_parameters() == expected_cnn_params(128, 16, (1, 2, 3, 4, 5), (16, 24, 32, 32, 24), 2, out_bias)


def test_output_depends_only_on_spelling():
    cnn = CharCNNEmbedder(6, max_word_length=10, char_dim=3, widths=(1, 2), features=(2, 2), rng=make_rng(0))
    a = cnn.embed_words(["cat", "dog", "cat"])
    np.testing.assert_array_equal(a[0], a[2])
    assert not np.allclose(a[0], a[1])
    with pytest.raises(ShapeError):
        cnn.forward(np.zeros((1, 9), dtype=np.int64))


def test_batched_shapes():
    cnn = CharCNNEmbedder(6, max_word_length=10, char_dim=3, widths=(1, 2), features=(2, 2), rng=make_rng(0))
    codes = CharCodec(10).encode_many(["a", "bb", "ccc", "d", "e", "f"]).reshape(2, 3, 10)
    out, _ = cnn.forward(codes)
    assert out.shape == (2, 3, 6)


def test_nearest_neighbors_ranking():
    cnn = CharCNNEmbedder(8, max_word_length=12, char_dim=4, widths=(1, 2, 3), features=(4, 4, 4), rng=make_rng(3))
    res = nearest_neighbors(cnn, "cat", 2, ["cat", "dog", "zebra"])
    assert res[0] == ("cat", pytest.approx(1.0))
    sims = cosine_similarity(np.array([1.0, 0.0]), np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(sims, [1.0, 0.0, -1.0])
    with pytest.raises(ValueError):
        nearest_neighbors(cnn, "x", 1, [])

import numpy as np
import pytest

from lmkit.corpus import build_vocab, encode_corpus
from lmkit.synthetic import sharp_bigram_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bigram_data():
    sents = sharp_bigram_corpus(3000, vocab=20, seed=5)
    vocab = build_vocab(sents)
    return vocab, encode_corpus(vocab, sents)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line for the acceptance summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:>2}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

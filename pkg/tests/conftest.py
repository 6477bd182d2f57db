import numpy as np
import pytest

from reghorizon.data import CorpusSpec, collate, generate
from reghorizon.model import ModelConfig, build
from reghorizon.numerics import RngStream

TINY = ModelConfig(vocab_size=12, d_model=8, n_heads=2, enc_layers=1, dec_layers=1,
                   ffn_dim=16, dropout=0.2, frame_dim=4)


@pytest.fixture
def tiny_spec():
    return CorpusSpec(vocab_size=12, min_len=2, max_len=5, size=40, frame_dim=4, seed=3)


@pytest.fixture
def tiny_corpus(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_model():
    return build(TINY, RngStream(1, 11))


@pytest.fixture
def tiny_batch(tiny_corpus):
    return collate(tiny_corpus.triples[:3])


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

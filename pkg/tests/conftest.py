import sys

import numpy as np
import pytest

from infnet.energies import ChainEnergy
from infnet.nn import EmbeddingTable


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_chain(n_labels=3, hidden_dim=4, emb_dim=3, vocab=6, seed=0, transition_scale=1.0):
    rng = np.random.default_rng(seed)
    table = EmbeddingTable.from_vectors([f"w{k}" for k in range(vocab)], rng.normal(size=(vocab, emb_dim)))
    chain = ChainEnergy(table, hidden_dim, n_labels, rng)
    chain.transitions.data[...] = transition_scale * rng.normal(size=(n_labels, n_labels))
    return chain


@pytest.fixture
def small_chain():
    return make_chain()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)

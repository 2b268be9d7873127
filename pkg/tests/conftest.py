import numpy as np
import pytest
import scipy.sparse as sp

from defense_vgae.datasets import synthetic_citation_graph
from defense_vgae.graph import DataSplit, build_graph


def random_graph(n, d, c, p=0.3, seed=0):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(upper)
    features = (rng.random((n, d)) < 0.5).astype(float)
    labels = np.arange(n) % c
    ids = rng.permutation(n)
    third = n // 3
    split = DataSplit(ids[:third], ids[third : 2 * third], ids[2 * third :])
    return build_graph(edges, features, labels, split)


@pytest.fixture
def tiny_graph():
    return random_graph(6, 4, 2, seed=3)


@pytest.fixture(scope="session")
def small_citation():
    return synthetic_citation_graph(n_nodes=300, n_classes=3, n_features=120, n_edges=600, seed=7)


@pytest.fixture(scope="session")
def cora_like():
    return synthetic_citation_graph(seed=0)


def dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(f"ACCEPTANCE {line}")

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphprompter.graph import Graph  # noqa: E402


def make_graph(n, edges, feature_dim=4, labels=None, rels=None, edge_labels=None, seed=0):
    """Small graph with node ids 0..n-1 and random features."""
    rng = np.random.default_rng(seed)
    src = [u for u, _ in edges]
    dst = [v for _, v in edges]
    return Graph(
        node_ids=np.arange(n),
        features=rng.normal(size=(n, feature_dim)),
        node_labels=np.full(n, -1) if labels is None else np.asarray(labels),
        src=np.asarray(src, dtype=np.int64),
        rel=np.zeros(len(edges), dtype=np.int64) if rels is None else np.asarray(rels),
        dst=np.asarray(dst, dtype=np.int64),
        edge_labels=np.full(len(edges), -1) if edge_labels is None else np.asarray(edge_labels),
    )


@pytest.fixture
def star():
    return make_graph(6, [(0, i) for i in range(1, 6)])


@pytest.fixture
def path5():
    return make_graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by test_acceptance.py: number -> (status, summary)
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, summary = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {summary}")

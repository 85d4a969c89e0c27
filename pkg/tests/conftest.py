import numpy as np
import pytest

from sia.graph import Graph, Subgraph, build_graph, load_dataset

CORA_DIR = "tests/data/cora"


@pytest.fixture(scope="session")
def cora():
    g, meta = load_dataset(CORA_DIR, label_frac=0.05, seed=42)
    return g


@pytest.fixture
def tiny_graph():
    """8-node ring with two chords, 3 classes, random features."""
    rng = np.random.default_rng(5)
    edges = [(i, (i + 1) % 8) for i in range(8)] + [(0, 4), (2, 6)]
    return build_graph(edges, rng.random((8, 5)),
                       rng.integers(0, 3, 8), train_frac=0.5, seed=3)


@pytest.fixture
def path_graph():
    """0-1-2-3 path, 2 classes."""
    feats = np.arange(8, dtype=float).reshape(4, 2)
    return build_graph([(0, 1), (1, 2), (2, 3)], feats, [0, 1, 0, 1],
                       train_frac=0.5, seed=0)


@pytest.fixture
def small_payload():
    adj = np.zeros((3, 3))
    adj[0, 1] = adj[1, 0] = 1.0
    feats = np.full((3, 5), 0.25)
    return Subgraph(adjacency=adj, features=feats, edge_budget=1)

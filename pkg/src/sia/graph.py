"""Graph containers and structural operations shared by every attack stage.

The host graph is immutable; the injected payload subgraph is the only
mutable object and is confined to a single attack run. All adjacency
matrices are binary, symmetric and zero-diagonal; undirected edges are
stored once per direction but counted once in every budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp


class GraphError(ValueError):
    """Inconsistent graph construction, composition, or sampling inputs."""


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Graph:
    """Attributed undirected host graph with label masks."""

    adjacency: sp.csr_matrix          # (N, N) binary, symmetric, zero diagonal
    features: np.ndarray              # (N, D) float64
    labels: np.ndarray                # (N,) int64, values in [0, C)
    train_mask: np.ndarray            # (N,) bool, labelled-for-training nodes
    val_mask: np.ndarray              # (N,) bool, disjoint from train_mask

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.adjacency.nnz // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.adjacency.indices[self.adjacency.indptr[v]:self.adjacency.indptr[v + 1]]

    def edge_array(self) -> np.ndarray:
        """Canonical (E, 2) array of undirected edges with i < j, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        edges = np.stack([coo.row, coo.col], axis=1)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return edges[order]

    def feature_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension [min, max] of the host features."""
        return self.features.min(axis=0), self.features.max(axis=0)


@dataclass
class Subgraph:
    """Injected payload: the attack's optimization variable.

    The adjacency is a small dense block; the number of undirected edges
    must equal ``edge_budget`` at all times after initialization.
    """

    adjacency: np.ndarray             # (n, n) float64 in {0, 1}, symmetric, zero diagonal
    features: np.ndarray              # (n, D) float64
    edge_budget: int

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, k=1)))

    def validate(self) -> None:
        a = self.adjacency
        if a.shape[0] != a.shape[1]:
            raise GraphError(f"payload adjacency must be square, got {a.shape}")
        if self.features.shape[0] != a.shape[0]:
            raise GraphError("payload feature rows must match node count")
        if a.size and not np.array_equal(a, a.T):
            raise GraphError("payload adjacency must be symmetric")
        if a.size and np.any(np.diag(a) != 0):
            raise GraphError("payload adjacency must have a zero diagonal")
        if not np.all((a == 0) | (a == 1)):
            raise GraphError("payload adjacency must be binary")
        if self.num_edges != self.edge_budget:
            raise GraphError(
                f"payload has {self.num_edges} edges, budget is {self.edge_budget}")

    def copy(self) -> "Subgraph":
        return Subgraph(self.adjacency.copy(), self.features.copy(), self.edge_budget)

    def edge_list(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(ii.tolist(), jj.tolist()))


def empty_subgraph(num_features: int) -> Subgraph:
    return Subgraph(np.zeros((0, 0)), np.zeros((0, num_features)), 0)


@dataclass(frozen=True)
class PoisonedGraph:
    """Block-diagonal composition of a host graph and a payload subgraph."""

    host: Graph
    payload: Subgraph

    @property
    def num_nodes(self) -> int:
        return self.host.num_nodes + self.payload.num_nodes

    @property
    def num_edges(self) -> int:
        return self.host.num_edges + self.payload.num_edges

    def payload_ids(self) -> np.ndarray:
        """Global indices of the payload nodes: subgraph node i maps to N_o + i."""
        n = self.host.num_nodes
        return np.arange(n, n + self.payload.num_nodes)

    def adjacency(self) -> sp.csr_matrix:
        """Materialized block-diagonal adjacency."""
        if self.payload.num_nodes == 0:
            return self.host.adjacency.copy()
        return sp.bmat(
            [[self.host.adjacency, None],
             [None, sp.csr_matrix(self.payload.adjacency)]],
            format="csr")

    def features(self) -> np.ndarray:
        """Materialized stacked feature matrix."""
        if self.payload.num_nodes == 0:
            return self.host.features.copy()
        return np.vstack([self.host.features, self.payload.features])

    def host_block(self) -> sp.csr_matrix:
        n = self.host.num_nodes
        return self.adjacency()[:n, :n].tocsr()

    def payload_block(self) -> np.ndarray:
        n = self.host.num_nodes
        return self.adjacency()[n:, n:].toarray()

    def has_edge(self, i: int, j: int) -> bool:
        n = self.host.num_nodes
        if i < n and j < n:
            return self.host.adjacency[i, j] != 0
        if i >= n and j >= n:
            return self.payload.adjacency[i - n, j - n] != 0
        return False


@dataclass(frozen=True)
class EdgeSplit:
    """Partition of the host's undirected edges for link-predictor training.

    ``train_edges`` build the predictor's message-passing graph,
    ``positive_labels`` (a subset) are the supervised positives, and
    ``held_out`` edges stay invisible to the predictor.
    """

    train_edges: np.ndarray           # (T, 2)
    positive_labels: np.ndarray       # (P, 2), subset of train_edges
    held_out: np.ndarray              # (H, 2)


# ---------------------------------------------------------------------------
# construction and composition
# ---------------------------------------------------------------------------

def build_graph(edges, features, labels, train_frac: float, seed: int) -> Graph:
    """Assemble a validated host graph and draw its training-label mask.

    Duplicate undirected edges are merged. Self-loops are rejected.
    The train mask marks ceil(train_frac * N) nodes sampled uniformly
    without replacement under ``seed``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2:
        raise GraphError("features must be a 2-d matrix")
    n = features.shape[0]
    if labels.shape != (n,):
        raise GraphError(
            f"labels must have one entry per node, got {labels.shape} for {n} nodes")
    if labels.size and labels.min() < 0:
        raise GraphError("labels must be non-negative class indices")
    if not (0.0 < train_frac <= 1.0):
        raise GraphError(f"train_frac must be in (0, 1], got {train_frac}")

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= n:
            raise GraphError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed")
    adjacency = _symmetric_csr(edges, n)

    rng = np.random.default_rng(seed)
    n_train = int(np.ceil(train_frac * n))
    train_mask = np.zeros(n, dtype=bool)
    train_mask[rng.choice(n, size=n_train, replace=False)] = True
    val_mask = np.zeros(n, dtype=bool)
    return Graph(adjacency, features, labels, train_mask, val_mask)


def _symmetric_csr(edges: np.ndarray, n: int) -> sp.csr_matrix:
    if edges.size == 0:
        return sp.csr_matrix((n, n))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.ones(rows.shape[0])
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0  # deduplicate repeated input edges
    adj.sort_indices()
    return adj


def compose_poisoned(host: Graph, payload: Subgraph) -> PoisonedGraph:
    """Form the block-diagonal poisoned graph; no cross edges exist."""
    if payload.num_nodes and payload.num_features != host.num_features:
        raise GraphError(
            f"payload feature dim {payload.num_features} != host {host.num_features}")
    payload.validate()
    return PoisonedGraph(host, payload)


def normalize_adjacency(adjacency):
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2.

    Accepts a sparse or dense symmetric zero-diagonal matrix and returns
    the same kind. Isolated nodes get degree 1 from their self-loop.
    """
    if sp.issparse(adjacency):
        n = adjacency.shape[0]
        a_hat = (adjacency + sp.identity(n, format="csr")).tocsr()
        deg = np.asarray(a_hat.sum(axis=1)).ravel()
        d_inv = 1.0 / np.sqrt(deg)
        return (sp.diags(d_inv) @ a_hat @ sp.diags(d_inv)).tocsr()
    a = np.asarray(adjacency, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    d_inv = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv[:, None] * d_inv[None, :]


def n_hop_neighborhood(g: Graph, v: int, n: int) -> np.ndarray:
    """Sorted ids of all nodes within shortest-path distance n of v (v included)."""
    if not (0 <= v < g.num_nodes):
        raise GraphError(f"node {v} out of range for {g.num_nodes} nodes")
    if n < 0:
        raise GraphError("hop count must be non-negative")
    seen = {v}
    frontier = [v]
    for _ in range(n):
        nxt = []
        for u in frontier:
            for w in g.neighbors(u):
                w = int(w)
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        if not nxt:
            break
        frontier = nxt
    return np.array(sorted(seen), dtype=np.int64)


def edge_split(g: Graph, train_frac: float, label_frac: float = 0.5,
               seed: int = 0) -> EdgeSplit:
    """Sample the link-predictor's training split over undirected edges.

    ceil(train_frac * |E|) edges become train_edges; ceil(label_frac * T)
    of those become the supervised positives. Deterministic under seed.
    """
    if not (0.0 < train_frac <= 1.0) or not (0.0 < label_frac <= 1.0):
        raise GraphError("split fractions must be in (0, 1]")
    edges = g.edge_array()
    if edges.shape[0] == 0:
        raise GraphError("cannot split an empty edge set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(edges.shape[0])
    n_train = int(np.ceil(train_frac * edges.shape[0]))
    train = edges[np.sort(perm[:n_train])]
    held = edges[np.sort(perm[n_train:])]
    n_pos = int(np.ceil(label_frac * n_train))
    pos_perm = rng.permutation(n_train)
    positives = train[np.sort(pos_perm[:n_pos])]
    return EdgeSplit(train_edges=train, positive_labels=positives, held_out=held)


def edge_key_set(g) -> set:
    """Hashable undirected edge keys (min*n + max) for fast non-edge tests."""
    if isinstance(g, PoisonedGraph):
        n = g.num_nodes
        coo = sp.triu(g.host.adjacency, k=1).tocoo()
        keys = set((coo.row.astype(np.int64) * n + coo.col).tolist())
        base = g.host.num_nodes
        ii, jj = np.nonzero(np.triu(g.payload.adjacency, k=1))
        keys.update(((ii.astype(np.int64) + base) * n + (jj + base)).tolist())
        return keys
    adj = g.adjacency if isinstance(g, Graph) else g
    n = adj.shape[0]
    coo = sp.triu(adj, k=1).tocoo()
    return set((coo.row.astype(np.int64) * n + coo.col).tolist())


def sample_nonedges(n: int, edge_keys: set, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Uniform non-edge, non-self pairs via vectorized rejection sampling."""
    if len(edge_keys) >= n * (n - 1) // 2:
        raise GraphError("graph is complete; no negative pairs exist")
    out = np.empty((count, 2), dtype=np.int64)
    filled = 0
    while filled < count:
        batch = max(count - filled, 64)
        ii = rng.integers(0, n, size=2 * batch)
        jj = rng.integers(0, n, size=2 * batch)
        for i, j in zip(ii.tolist(), jj.tolist()):
            if i == j:
                continue
            key = i * n + j if i < j else j * n + i
            if key in edge_keys:
                continue
            out[filled] = (i, j)
            filled += 1
            if filled == count:
                break
    return out


def sample_negative_edges(g, count: int, positives: np.ndarray, seed=None) -> np.ndarray:
    """Draw ``count`` uniform non-edge node pairs per positive edge.

    The proposal distribution is uniform over all non-adjacent,
    non-identical node pairs of the (poisoned) graph. No sampled pair is
    an existing edge or a self-loop. Accepts a seed or a Generator.
    """
    if count < 1:
        raise GraphError("need at least one negative per positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = g.num_nodes
    needed = count * int(np.asarray(positives).reshape(-1, 2).shape[0])
    return sample_nonedges(n, edge_key_set(g), needed, rng)


def negative_sampler_for(g, count: int, positives: np.ndarray):
    """Reusable sampler drawing fresh negatives from a fixed edge set."""
    keys = edge_key_set(g)
    n = g.num_nodes
    needed = count * int(np.asarray(positives).reshape(-1, 2).shape[0])
    return lambda rng: sample_nonedges(n, keys, needed, rng)


# ---------------------------------------------------------------------------
# neutral dataset format
# ---------------------------------------------------------------------------

DATASET_FILES = ("meta.json", "edges.csv", "features.csv", "labels.csv")


def load_dataset(path, label_frac: float = 0.05, seed: int = 0) -> tuple[Graph, dict]:
    """Load a neutral-format dataset directory and draw the label mask.

    Returns the graph and the parsed meta.json.
    """
    path = Path(path)
    for name in DATASET_FILES:
        if not (path / name).exists():
            raise GraphError(f"dataset directory {path} is missing {name}")
    meta = json.loads((path / "meta.json").read_text())
    edges = pd.read_csv(path / "edges.csv", header=None).to_numpy(dtype=np.int64)
    features = pd.read_csv(path / "features.csv", header=None).to_numpy(dtype=np.float64)
    labels = pd.read_csv(path / "labels.csv", header=None).to_numpy(dtype=np.int64).ravel()
    g = build_graph(edges, features, labels, train_frac=label_frac, seed=seed)
    return g, meta


def validate_dataset(path) -> dict:
    """Check a neutral-format directory against the core graph invariants.

    Returns {"passed": bool, "checks": [{"name", "passed", "detail"}, ...]};
    failures are report entries, not exceptions.
    """
    path = Path(path)
    checks = []

    def check(name, passed, detail=""):
        checks.append({"name": name, "passed": bool(passed), "detail": detail})

    missing = [n for n in DATASET_FILES if not (path / n).exists()]
    check("files present", not missing, f"missing: {missing}" if missing else "")
    if missing:
        return {"passed": False, "checks": checks}

    try:
        meta = json.loads((path / "meta.json").read_text())
        edges = pd.read_csv(path / "edges.csv", header=None).to_numpy(dtype=np.int64)
        features = pd.read_csv(path / "features.csv", header=None).to_numpy(dtype=np.float64)
        labels = pd.read_csv(path / "labels.csv", header=None).to_numpy(dtype=np.int64).ravel()
    except Exception as exc:  # malformed files are report entries
        check("files parse", False, str(exc))
        return {"passed": False, "checks": checks}
    check("files parse", True)

    n = features.shape[0]
    check("label count matches nodes", labels.shape[0] == n,
          f"{labels.shape[0]} labels for {n} nodes")
    if edges.size:
        check("no self-loops", not np.any(edges[:, 0] == edges[:, 1]))
        check("endpoints in range", edges.min() >= 0 and edges.max() < n)
    else:
        check("no self-loops", True)
        check("endpoints in range", True)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    check("labels in class range", labels.size == 0 or labels.min() >= 0)

    und = {tuple(sorted(e)) for e in edges.tolist()}
    check("edges unique as undirected", len(und) == edges.shape[0],
          f"{edges.shape[0] - len(und)} duplicates")

    for key, actual in (("num_nodes", n),
                        ("num_features", features.shape[1]),
                        ("num_classes", n_classes),
                        ("num_undirected_edges", len(und)),
                        ("num_directed_entries", 2 * len(und))):
        if key in meta:
            check(f"meta {key}", meta[key] == actual,
                  f"meta says {meta[key]}, data has {actual}")

    if all(c["passed"] for c in checks):
        try:
            g = build_graph(edges, features, labels, train_frac=0.05, seed=0)
            check("adjacency symmetric", (g.adjacency != g.adjacency.T).nnz == 0)
        except GraphError as exc:
            check("graph builds", False, str(exc))

    return {"passed": all(c["passed"] for c in checks), "checks": checks}

"""Comparison attacks: the neighborhood-copy heuristic and the
link-probability-controlled single-node injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attack import AttackError, attack_label
from .autodiff import Tape
from .graph import Graph, PoisonedGraph, Subgraph, compose_poisoned, n_hop_neighborhood
from .models import (ClassifierParams, GraphView, adjacency_with_links,
                     classifier_logits, _sparse_features)


@dataclass(frozen=True)
class CopyPayload:
    """Copied-neighborhood payload plus the index of the target's twin."""

    subgraph: Subgraph
    anchor: int


def graph_copy(g_o: Graph, target: int, hops: int = 2, noise_frac: float = 0.1,
               seed: int = 0) -> CopyPayload:
    """Duplicate the target's n-hop neighborhood as an isolated payload.

    Copied features get Gaussian noise with per-dimension standard
    deviation noise_frac * std(host features); with noise_frac = 0 the
    copy is exact. The payload grows roughly quadratically with the
    target's degree.
    """
    if hops < 0:
        raise AttackError("hop count must be non-negative")
    nodes = n_hop_neighborhood(g_o, target, hops)
    index = {int(v): i for i, v in enumerate(nodes)}
    n = nodes.size
    adjacency = g_o.adjacency[nodes][:, nodes].toarray()
    features = g_o.features[nodes].copy()
    if noise_frac > 0:
        rng = np.random.default_rng(seed)
        scale = noise_frac * g_o.features.std(axis=0)
        features += rng.standard_normal(features.shape) * scale
    n_edges = int(np.count_nonzero(np.triu(adjacency, k=1)))
    payload = Subgraph(adjacency=adjacency, features=features, edge_budget=n_edges)
    return CopyPayload(subgraph=payload, anchor=index[target])


@dataclass
class NiaConfig:
    """Single-node injection with a regulated link-formation probability."""

    lsr: float = 1.0
    feature_steps: int = 200
    feature_lr: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.lsr <= 1.0):
            raise AttackError(f"lsr must be in [0, 1], got {self.lsr}")
        if self.feature_steps < 0:
            raise AttackError("feature_steps must be non-negative")


@dataclass(frozen=True)
class NiaResult:
    poisoned: PoisonedGraph
    link_formed: bool
    link: tuple                      # (target, aggressor id)
    y_atk: int


def nia_attack(g_o: Graph, target: int, config: NiaConfig,
               surrogate: ClassifierParams) -> NiaResult:
    """Inject one aggressor node whose features push the target off-class.

    The aggressor's features are optimized against the fixed surrogate
    under the hypothesis that the target link exists (adaptive per-feature
    steps, box projection every step); the link itself then materializes
    with probability lsr. With lsr = 0 the aggressor stays isolated and
    cannot influence message passing.
    """
    config.validate()
    label = attack_label(surrogate, g_o, target)
    rng = np.random.default_rng(config.seed)
    lo, hi = g_o.feature_box()

    n_o = g_o.num_nodes
    aggressor = n_o
    start = g_o.features[rng.integers(0, n_o)].copy()[None, :]
    features = _optimize_aggressor(g_o, target, label.y_atk, surrogate, start,
                                   config, (lo, hi))

    payload = Subgraph(adjacency=np.zeros((1, 1)), features=features, edge_budget=0)
    link_formed = bool(rng.random() < config.lsr)
    return NiaResult(poisoned=compose_poisoned(g_o, payload),
                     link_formed=link_formed, link=(target, aggressor),
                     y_atk=label.y_atk)


def _optimize_aggressor(g_o, target, y_atk, surrogate, features, config, box):
    """Adam on the attack-label cross-entropy with the hypothetical link."""
    n_o = g_o.num_nodes
    hyp_payload = Subgraph(np.zeros((1, 1)), features, 0)
    hyp = compose_poisoned(g_o, hyp_payload)
    adj = adjacency_with_links(hyp.adjacency(), [(target, n_o)])
    host_x = _sparse_features(g_o.features)
    lo, hi = box

    from .models import Adam
    adam = Adam([features.shape], lr=config.feature_lr)
    from .graph import normalize_adjacency
    operator = normalize_adjacency(adj)
    for _ in range(config.feature_steps):
        tape = Tape()
        fs = tape.leaf(features, name="aggressor")
        view = GraphView(adj, host_x, fs)
        logits = classifier_logits(tape, surrogate, view, operator=operator)
        row = tape.gather_rows(logits, np.array([target]))
        loss = tape.softmax_cross_entropy(row, np.array([y_atk]))
        bundle = tape.backward(loss)
        adam.step([features], [bundle.params["aggressor"]])
        np.clip(features, lo, hi, out=features)
    return features

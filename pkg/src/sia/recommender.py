"""Deployed link-recommender simulation: scoring, top-k acceptance, update.

The modeled user accepts every proposal, but only proposals that land in
the injected subgraph materialize as adversarial edges (the target-to-
payload block); proposals pointing at host nodes are recorded in the
ranking without altering the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import GraphError, PoisonedGraph
from .models import (GraphView, LinkPredictorParams, adjacency_with_links,
                     decode_scores, encode_links, view_of_poisoned)


@dataclass(frozen=True)
class Recommendation:
    """Ranked proposals for one target and the adversarial links they imply."""

    target: int
    proposed: tuple                     # ((node, score), ...) best first
    accepted_links: tuple               # ((target, node), ...) landing in the payload
    link_success: bool
    short_pool: bool = False            # fewer candidates than requested

    @property
    def num_links(self) -> int:
        return len(self.accepted_links)


def link_scores(g_p: PoisonedGraph, predictor: LinkPredictorParams,
                target: int, view: GraphView | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Scores between the target and every non-neighbor, non-self node.

    Host and payload nodes are both eligible. ``view`` selects the
    message graph for embedding (defaults to the full poisoned graph;
    pass the predictor's training view for consistency with training).
    Returns (candidate ids, scores) in id order.
    """
    n = g_p.num_nodes
    if not (0 <= target < g_p.host.num_nodes):
        raise GraphError(f"target {target} is not a host node")
    z, _ = encode_links(view if view is not None else view_of_poisoned(g_p),
                        predictor)
    excluded = np.zeros(n, dtype=bool)
    excluded[target] = True
    excluded[g_p.host.neighbors(target)] = True
    candidates = np.flatnonzero(~excluded)
    pairs = np.stack([np.full(candidates.shape, target), candidates], axis=1)
    return candidates, decode_scores(z, pairs)


def recommend_top_k(target: int, candidates: np.ndarray, scores: np.ndarray,
                    k: int, num_host: int) -> Recommendation:
    """Apply the top-k acceptance rule with lowest-id tie-breaking."""
    if k < 1:
        raise GraphError("k must be at least 1")
    short = candidates.size < k
    take = min(k, candidates.size)
    order = np.lexsort((candidates, -scores))[:take]
    proposed = tuple((int(candidates[i]), float(scores[i])) for i in order)
    accepted = tuple((target, node) for node, _ in proposed if node >= num_host)
    return Recommendation(target=target, proposed=proposed,
                          accepted_links=accepted,
                          link_success=bool(accepted), short_pool=short)


def apply_recommendation(g_p: PoisonedGraph, rec: Recommendation) -> GraphView:
    """Materialize the accepted adversarial links; features are unchanged."""
    for i, j in rec.accepted_links:
        if rec.target not in (i, j):
            raise GraphError("accepted links must touch the target node")
        if g_p.has_edge(i, j):
            raise GraphError(f"link ({i}, {j}) duplicates an existing edge")
    return view_of_poisoned(g_p, links=rec.accepted_links)


def recommended_adjacency(g_p: PoisonedGraph, links) -> sp.csr_matrix:
    """Adjacency of the updated graph for a given link set."""
    return adjacency_with_links(g_p.adjacency(), links)

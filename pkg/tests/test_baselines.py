import numpy as np
import pytest

from sia.baselines import NiaConfig, graph_copy, nia_attack
from sia.graph import build_graph, compose_poisoned, n_hop_neighborhood
from sia.models import classify, train_classifier, view_of_graph, GraphView, \
    adjacency_with_links, _sparse_features
from sia.attack import AttackError


@pytest.fixture
def labeled_graph():
    rng = np.random.default_rng(21)
    edges = [(i, (i + 1) % 12) for i in range(12)] + [(0, 6), (3, 9), (1, 7)]
    return build_graph(edges, rng.random((12, 5)), rng.integers(0, 3, 12),
                       train_frac=0.5, seed=4)


class TestGraphCopy:
    def test_zero_hop_zero_noise_exact_copy(self, labeled_graph):
        cp = graph_copy(labeled_graph, 3, hops=0, noise_frac=0.0, seed=0)
        assert cp.subgraph.num_nodes == 1
        assert cp.subgraph.num_edges == 0
        assert np.array_equal(cp.subgraph.features[0], labeled_graph.features[3])
        assert cp.anchor == 0

    def test_path_one_hop_isomorphic(self):
        feats = np.arange(6, dtype=float).reshape(3, 2)
        g = build_graph([(0, 1), (1, 2)], feats, [0, 1, 0], train_frac=1.0, seed=0)
        cp = graph_copy(g, 1, hops=1, noise_frac=0.0, seed=0)
        assert cp.subgraph.num_nodes == 3
        assert cp.subgraph.num_edges == 2
        # induced copy preserves the path structure around the anchor
        assert cp.subgraph.adjacency[cp.anchor].sum() == 2
        assert np.array_equal(cp.subgraph.features, feats)

    def test_noise_zero_features_identical(self, labeled_graph):
        cp = graph_copy(labeled_graph, 0, hops=2, noise_frac=0.0, seed=3)
        nodes = n_hop_neighborhood(labeled_graph, 0, 2)
        assert np.array_equal(cp.subgraph.features, labeled_graph.features[nodes])

    def test_isomorphic_to_induced_neighborhood(self, labeled_graph):
        cp = graph_copy(labeled_graph, 5, hops=2, noise_frac=0.1, seed=3)
        nodes = n_hop_neighborhood(labeled_graph, 5, 2)
        induced = labeled_graph.adjacency[nodes][:, nodes].toarray()
        assert cp.subgraph.num_nodes == nodes.size
        assert np.array_equal(cp.subgraph.adjacency, induced)
        cp.subgraph.validate()

    def test_noise_scales_with_feature_std(self, labeled_graph):
        a = graph_copy(labeled_graph, 5, hops=1, noise_frac=0.1, seed=3)
        b = graph_copy(labeled_graph, 5, hops=1, noise_frac=0.0, seed=3)
        delta = np.abs(a.subgraph.features - b.subgraph.features)
        assert delta.max() > 0
        # perturbation is a few percent of the per-dimension spread
        assert delta.max() < labeled_graph.features.std(axis=0).max()

    def test_negative_hops_rejected(self, labeled_graph):
        with pytest.raises(AttackError):
            graph_copy(labeled_graph, 0, hops=-1)


class TestNia:
    def _surrogate(self, g):
        return train_classifier(view_of_graph(g), g.labels, g.train_mask,
                                hidden=8, steps=40, seed=2)

    def test_lsr_one_always_links(self, labeled_graph):
        surrogate = self._surrogate(labeled_graph)
        for seed in range(5):
            res = nia_attack(labeled_graph, 2,
                             NiaConfig(lsr=1.0, feature_steps=5, seed=seed),
                             surrogate)
            assert res.link_formed

    def test_lsr_zero_never_links(self, labeled_graph):
        surrogate = self._surrogate(labeled_graph)
        for seed in range(5):
            res = nia_attack(labeled_graph, 2,
                             NiaConfig(lsr=0.0, feature_steps=5, seed=seed),
                             surrogate)
            assert not res.link_formed

    def test_isolated_aggressor_cannot_change_predictions(self, labeled_graph):
        """With lsr = 0 the aggressor stays isolated; a victim trained on the
        poisoned graph predicts the host exactly as a clean-graph victim."""
        surrogate = self._surrogate(labeled_graph)
        res = nia_attack(labeled_graph, 2, NiaConfig(lsr=0.0, feature_steps=20,
                                                     seed=7), surrogate)
        assert not res.link_formed
        g = labeled_graph

        clean_victim = train_classifier(view_of_graph(g), g.labels,
                                        g.train_mask, hidden=8, steps=60, seed=9)
        clean_pred = classify(view_of_graph(g), clean_victim).predicted

        labels_p = np.concatenate([g.labels, [0]])
        mask_p = np.concatenate([g.train_mask, [False]])
        view_p = GraphView(res.poisoned.adjacency(),
                           _sparse_features(g.features),
                           res.poisoned.payload.features)
        poisoned_victim = train_classifier(view_p, labels_p, mask_p, hidden=8,
                                           steps=60, seed=9)
        poisoned_pred = classify(view_p, poisoned_victim).predicted
        assert np.array_equal(clean_pred, poisoned_pred[:g.num_nodes])

    def test_features_stay_in_box(self, labeled_graph):
        surrogate = self._surrogate(labeled_graph)
        res = nia_attack(labeled_graph, 4, NiaConfig(lsr=1.0, feature_steps=30,
                                                     seed=1), surrogate)
        lo, hi = labeled_graph.feature_box()
        assert np.all(res.poisoned.payload.features >= lo - 1e-12)
        assert np.all(res.poisoned.payload.features <= hi + 1e-12)

    def test_link_rate_matches_probability(self, labeled_graph):
        """Empirical link-formation rate over seeded runs stays inside a
        3-sigma binomial band around lsr."""
        surrogate = self._surrogate(labeled_graph)
        lsr, n = 0.3, 120
        formed = sum(
            nia_attack(labeled_graph, 2,
                       NiaConfig(lsr=lsr, feature_steps=0, seed=seed),
                       surrogate).link_formed
            for seed in range(n))
        sigma = np.sqrt(lsr * (1 - lsr) / n)
        assert abs(formed / n - lsr) <= 3 * sigma

    def test_invalid_lsr_rejected(self, labeled_graph):
        with pytest.raises(AttackError):
            NiaConfig(lsr=1.5).validate()

import numpy as np
import pytest
import scipy.sparse as sp

from sia.autodiff import (DifferentiationError, Tape, finite_diff_check,
                          record_forward)
from sia.graph import build_graph, normalize_adjacency


def random_graph(n, d, seed):
    rng = np.random.default_rng(seed)
    edges = [(i, (i + 1) % n) for i in range(n)]
    extra = rng.integers(0, n, size=(n // 2, 2))
    edges += [(int(a), int(b)) for a, b in extra if a != b]
    return build_graph(list(set(map(lambda e: tuple(sorted(e)), edges))),
                       rng.random((n, d)), rng.integers(0, 3, n),
                       train_frac=0.5, seed=seed)


class TestBasicGradients:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3), name="x")
        bundle = tape.backward(tape.sum(x))
        assert np.array_equal(bundle.params["x"], np.ones((2, 3)))

    def test_quadratic(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0]]), name="x")
        loss = tape.sum(tape.square(x))
        bundle = tape.backward(loss)
        assert np.array_equal(bundle.params["x"], np.array([[2.0, 4.0]]))

    def test_constant_loss_zero_bundle(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)), name="x")
        loss = tape.sum(np.ones((3,)))  # constant operand, no path to x
        bundle = tape.backward(loss)
        assert np.array_equal(bundle.params["x"], np.zeros((2, 2)))

    def test_sigmoid_decode_chain_rule(self):
        """d sigma(z_i . z_j) / d z_i = sigma' * z_j, checked by hand."""
        zi = np.array([0.3, -0.7, 1.1])
        zj = np.array([0.5, 0.2, -0.4])
        tape = Tape()
        z = tape.leaf(np.stack([zi, zj]), name="z")
        score = tape.sigmoid(tape.pair_inner(z, [(0, 1)]))
        bundle = tape.backward(tape.sum(score))
        s = 1 / (1 + np.exp(-zi @ zj))
        assert bundle.params["z"][0] == pytest.approx(s * (1 - s) * zj)
        assert bundle.params["z"][1] == pytest.approx(s * (1 - s) * zi)

    def test_non_scalar_backward_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3), name="x")
        with pytest.raises(DifferentiationError):
            tape.backward(tape.relu(x))

    def test_record_forward_requires_scalar(self):
        with pytest.raises(DifferentiationError):
            record_forward(lambda tape: tape.relu(tape.leaf(np.ones(2))))

    def test_gradient_linearity(self):
        """grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) on random instances."""
        rng = np.random.default_rng(0)
        for _ in range(5):
            x0 = rng.random((3, 4))
            a, b = rng.random(2) + 0.5

            def parts(seed_tape):
                x = seed_tape.leaf(x0, name="x")
                l1 = seed_tape.sum(tape_square := seed_tape.square(x))
                l2 = seed_tape.sum(seed_tape.sigmoid(x))
                return x, l1, l2

            t1 = Tape()
            _, l1, l2 = parts(t1)
            combined = t1.add(t1.scale(l1, a), t1.scale(l2, b))
            g_combined = t1.backward(combined).params["x"]
            g1 = t1.backward(l1).params["x"]
            g2 = t1.backward(l2).params["x"]
            assert g_combined == pytest.approx(a * g1 + b * g2)

    def test_backward_deterministic_bitwise(self):
        def build():
            tape = Tape()
            x = tape.leaf(np.linspace(-1, 1, 12).reshape(3, 4), name="x")
            h = tape.relu(tape.matmul(x, np.linspace(0, 1, 8).reshape(4, 2)))
            return tape, tape.sum(tape.sigmoid(h))

        t1, l1 = build()
        t2, l2 = build()
        g1 = t1.backward(l1).params["x"]
        g2 = t2.backward(l2).params["x"]
        assert np.array_equal(g1, g2)

    def test_softmax_cross_entropy_matches_manual(self):
        logits = np.array([[2.0, 1.0, 0.1], [0.5, 0.5, 0.5]])
        labels = np.array([0, 2])
        tape = Tape()
        lv = tape.leaf(logits, name="logits")
        loss = tape.softmax_cross_entropy(lv, labels)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        manual = -np.log(probs[[0, 1], labels]).mean()
        assert float(loss.value) == pytest.approx(manual)
        bundle = tape.backward(loss)
        onehot = np.zeros_like(logits)
        onehot[[0, 1], labels] = 1.0
        assert bundle.params["logits"] == pytest.approx((probs - onehot) / 2)


class TestFiniteDifferences:
    def test_linear_loss_exact(self):
        w = np.array([0.3, -0.2, 0.9])

        def f(x):
            return float(w @ x)

        worst, skipped = finite_diff_check(f, np.zeros(3), w, epsilon=1e-5)
        assert worst < 1e-9
        assert skipped == []

    def test_quadratic_loss(self):
        x0 = np.array([0.4, -1.2, 2.0])

        def f(x):
            return float((x ** 2).sum())

        worst, _ = finite_diff_check(f, x0, 2 * x0, epsilon=1e-4)
        assert worst < 1e-6

    def test_relu_kink_skipped_not_failed(self):
        # coordinate 0 sits exactly on the kink: sign flips between probes
        x0 = np.array([0.0, 1.0])

        def f(x):
            return float(np.maximum(x, 0.0).sum())

        def signature(x):
            return x

        worst, skipped = finite_diff_check(f, x0, np.array([0.0, 1.0]),
                                           epsilon=1e-5, signature_fn=signature)
        assert skipped == [0]
        assert worst < 1e-9

    def test_non_finite_probe_reported(self):
        def f(x):
            return float(np.log(x[0]))

        with pytest.raises(DifferentiationError):
            finite_diff_check(f, np.array([1e-9]), np.array([1e9]), epsilon=1e-5)

    def test_two_layer_gcn_cross_entropy(self):
        """Parameter gradients of a 2-layer propagation network against
        central differences on a 6-node random graph."""
        g = random_graph(6, 4, seed=2)
        m = normalize_adjacency(g.adjacency)
        rng = np.random.default_rng(1)
        w0 = rng.normal(0, 0.5, (4, 5))
        w1 = rng.normal(0, 0.5, (5, 3))
        labels = g.labels

        def loss_at(w0_flat):
            tape = Tape()
            w0v = tape.leaf(w0_flat.reshape(4, 5), name="w0")
            h = tape.relu(tape.spmm(m, tape.matmul(g.features, w0v)))
            logits = tape.spmm(m, tape.matmul(h, w1))
            return float(tape.softmax_cross_entropy(logits, labels).value)

        def signature(w0_flat):
            tape = Tape()
            w0v = tape.leaf(w0_flat.reshape(4, 5))
            tape.relu(tape.spmm(m, tape.matmul(g.features, w0v)))
            return np.concatenate([a.ravel() for a in tape.relu_inputs])

        tape = Tape()
        w0v = tape.leaf(w0, name="w0")
        h = tape.relu(tape.spmm(m, tape.matmul(g.features, w0v)))
        logits = tape.spmm(m, tape.matmul(h, w1))
        loss = tape.softmax_cross_entropy(logits, labels)
        grad = tape.backward(loss).params["w0"]

        worst, skipped = finite_diff_check(loss_at, w0.ravel(), grad.ravel(),
                                           epsilon=1e-5, signature_fn=signature)
        assert worst < 1e-6
        assert len(skipped) < w0.size


class TestTrackedAdjacency:
    def test_degree_terms_match_finite_differences(self):
        """Loss through the normalized operator, perturbing symmetric pairs
        of raw adjacency entries; the degree dependence must be exact."""
        rng = np.random.default_rng(7)
        n = 6
        adj = np.zeros((n, n))
        for i, j in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)]:
            adj[i, j] = adj[j, i] = 1.0
        x = rng.random((n, 3))
        w = rng.normal(0, 1, (3, 2))
        tracked = np.array([3, 4, 5])

        def loss_for(a_dense):
            deg = a_dense.sum(axis=1) + 1.0
            d_inv = 1.0 / np.sqrt(deg)
            m = (a_dense + np.eye(n)) * d_inv[:, None] * d_inv[None, :]
            h = m @ (x @ w)
            return float((h ** 2).sum())

        tape = Tape()
        op = tape.track_adjacency(sp.csr_matrix(adj), tracked, name="m")
        h = tape.spmm(op, tape.matmul(x, w))
        loss = tape.sum(tape.square(h))
        grad = tape.backward(loss).adjacency["m"]

        eps = 1e-6
        for a in range(3):
            for b in range(a + 1, 3):
                i, j = tracked[a], tracked[b]
                ap = adj.copy()
                ap[i, j] += eps
                ap[j, i] += eps
                am = adj.copy()
                am[i, j] -= eps
                am[j, i] -= eps
                numeric = (loss_for(ap) - loss_for(am)) / (2 * eps)
                analytic = 2 * grad[a, b]  # symmetric pair: g_ij + g_ji
                assert analytic == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_gradient_symmetrized_zero_diagonal(self):
        adj = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        tape = Tape()
        op = tape.track_adjacency(adj, np.array([0, 1]), name="m")
        h = tape.spmm(op, np.array([[1.0], [2.0]]))
        grad = tape.backward(tape.sum(h)).adjacency["m"]
        assert grad == pytest.approx(grad.T)
        assert np.all(np.diag(grad) == 0)

"""Minimal reverse-mode differentiation over the tensor ops the models need.

A `Tape` records primitive operations as they execute; `backward` replays
them once in reverse. Leaves are dense float64 arrays. The propagation
operator D^-1/2 (A+I) D^-1/2 can be registered as a `TrackedAdjacency`,
which differentiates the loss with respect to a designated block of raw
adjacency entries exactly, including the degree terms.

Everything is 64-bit and single-threaded per tape; two identical tapes
produce bitwise-identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class DifferentiationError(ValueError):
    """Malformed tape usage or non-finite values during differentiation."""


class Var:
    """A recorded intermediate value. Gradients appear after backward()."""

    __slots__ = ("value", "grad", "_back")

    def __init__(self, value, back=None):
        self.value = value
        self.grad = None
        self._back = back

    @property
    def shape(self):
        return np.shape(self.value)


def _accumulate(var: Var, g):
    if var.grad is None:
        var.grad = np.zeros_like(var.value, dtype=np.float64)
    var.grad += g


def _value(x):
    return x.value if isinstance(x, Var) else x


class TrackedAdjacency:
    """Normalized propagation operator with exact gradients on a node block.

    Built from the full binary adjacency (payload edges and any applied
    recommendation links included). Gradients are taken with respect to the
    raw adjacency entries among ``tracked`` nodes, treating each directed
    entry as a real-valued leaf at its current binary value; the dependence
    of the degree normalization on those entries is differentiated exactly.
    """

    def __init__(self, adjacency: sp.csr_matrix, tracked: np.ndarray):
        adjacency = adjacency.tocsr()
        n = adjacency.shape[0]
        deg = np.asarray(adjacency.sum(axis=1)).ravel() + 1.0
        d_inv = 1.0 / np.sqrt(deg)
        a_hat = (adjacency + sp.identity(n, format="csr")).tocsr()
        self.matrix = (sp.diags(d_inv) @ a_hat @ sp.diags(d_inv)).tocsr()
        self.tracked = np.asarray(tracked, dtype=np.int64)

        # ring: tracked nodes plus their neighbors; a tracked entry can only
        # influence operator entries whose row or column lies in the ring.
        neigh = set(self.tracked.tolist())
        for t in self.tracked:
            neigh.update(adjacency.indices[adjacency.indptr[t]:adjacency.indptr[t + 1]].tolist())
        self.ring = np.array(sorted(neigh), dtype=np.int64)
        self._ring_pos = {int(v): i for i, v in enumerate(self.ring)}
        self._tracked_local = np.array([self._ring_pos[int(t)] for t in self.tracked])
        self.degrees = deg
        self._m_ring = self.matrix[self.ring][:, self.ring].toarray()
        self._mbar_ring = np.zeros((len(self.ring), len(self.ring)))

    def accumulate(self, out_grad: np.ndarray, operand_value: np.ndarray) -> None:
        """Add this spmm's contribution to the operator adjoint on the ring."""
        self._mbar_ring += out_grad[self.ring] @ operand_value[self.ring].T

    def adjacency_grad(self) -> np.ndarray:
        """Symmetrized gradient over the tracked block, zero diagonal.

        For directed entry (i, j): the direct term routes the operator
        adjoint through the normalization scale, and the degree term
        collects row/column i contributions from d_i = 1 + sum_m a_im.
        """
        r = len(self.ring)
        mbar = self._mbar_ring
        m_ring = self._m_ring
        d_ring = self.degrees[self.ring]
        s_ring = 1.0 / np.sqrt(d_ring)

        prod = mbar * m_ring
        deg_term = (prod.sum(axis=1) + prod.sum(axis=0)) / (2.0 * d_ring)

        t = self._tracked_local
        direct = mbar[np.ix_(t, t)] * np.outer(s_ring[t], s_ring[t])
        raw = direct - deg_term[t][:, None]
        sym = 0.5 * (raw + raw.T)
        np.fill_diagonal(sym, 0.0)
        return sym

    def reset(self) -> None:
        self._mbar_ring[:] = 0.0


@dataclass
class GradientBundle:
    """Gradients keyed by leaf name, with adjacency blocks symmetrized."""

    params: dict = field(default_factory=dict)       # leaf name -> dense gradient
    adjacency: dict = field(default_factory=dict)    # operator name -> (n, n) block


class Tape:
    """Ordered record of primitive ops; one backward pass visits each once."""

    def __init__(self):
        self._order: list[Var] = []
        self._leaves: dict[str, Var] = {}
        self._tracked: dict[str, TrackedAdjacency] = {}
        self.relu_inputs: list[np.ndarray] = []

    # -- leaves ------------------------------------------------------------

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64))
        self._order.append(v)
        if name is not None:
            if name in self._leaves:
                raise DifferentiationError(f"duplicate leaf name {name!r}")
            self._leaves[name] = v
        return v

    def track_adjacency(self, adjacency: sp.csr_matrix, tracked_ids,
                        name: str) -> TrackedAdjacency:
        op = TrackedAdjacency(adjacency, tracked_ids)
        if name in self._tracked:
            raise DifferentiationError(f"duplicate tracked operator {name!r}")
        self._tracked[name] = op
        return op

    def _record(self, value, back) -> Var:
        v = Var(value, back)
        self._order.append(v)
        return v

    # -- primitives ----------------------------------------------------------

    def matmul(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        out_val = av @ bv

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g @ bv.T)
            if isinstance(b, Var):
                if sp.issparse(av):
                    _accumulate(b, av.T @ g)
                else:
                    _accumulate(b, av.T @ g)
        return self._record(np.asarray(out_val), back)

    def spmm(self, operator, x) -> Var:
        """Product of a propagation operator (sparse const or tracked) and x."""
        mat = operator.matrix if isinstance(operator, TrackedAdjacency) else operator
        xv = _value(x)
        out_val = np.asarray(mat @ xv)

        def back(g):
            if isinstance(x, Var):
                _accumulate(x, mat.T @ g)
            if isinstance(operator, TrackedAdjacency):
                operator.accumulate(g, xv)
        return self._record(out_val, back)

    def vstack(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        n_top = av.shape[0]
        out_val = np.vstack([av, bv])

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g[:n_top])
            if isinstance(b, Var):
                _accumulate(b, g[n_top:])
        return self._record(out_val, back)

    def add(self, a, b) -> Var:
        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g)
            if isinstance(b, Var):
                _accumulate(b, g)
        return self._record(_value(a) + _value(b), back)

    def sub(self, a, b) -> Var:
        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g)
            if isinstance(b, Var):
                _accumulate(b, -g)
        return self._record(_value(a) - _value(b), back)

    def mul(self, a, b) -> Var:
        av, bv = _value(a), _value(b)

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g * bv)
            if isinstance(b, Var):
                _accumulate(b, g * av)
        return self._record(av * bv, back)

    def scale(self, a, c: float) -> Var:
        def back(g):
            if isinstance(a, Var):
                _accumulate(a, c * g)
        return self._record(_value(a) * c, back)

    def relu(self, a) -> Var:
        av = _value(a)
        self.relu_inputs.append(av)
        mask = av > 0  # subgradient at 0 is 0

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g * mask)
        return self._record(av * mask, back)

    def sigmoid(self, a) -> Var:
        s = 1.0 / (1.0 + np.exp(-_value(a)))

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g * s * (1.0 - s))
        return self._record(s, back)

    def exp(self, a) -> Var:
        e = np.exp(_value(a))

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g * e)
        return self._record(e, back)

    def log(self, a) -> Var:
        av = _value(a)

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g / av)
        return self._record(np.log(av), back)

    def square(self, a) -> Var:
        av = _value(a)

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, 2.0 * av * g)
        return self._record(av * av, back)

    def clamp(self, a, lo: float, hi: float) -> Var:
        av = _value(a)
        inside = (av > lo) & (av < hi)

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, g * inside)
        return self._record(np.clip(av, lo, hi), back)

    def sum(self, a) -> Var:
        av = _value(a)

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, np.full_like(av, float(g)))
        return self._record(np.float64(np.sum(av)), back)

    def mean(self, a) -> Var:
        av = _value(a)
        size = av.size

        def back(g):
            if isinstance(a, Var):
                _accumulate(a, np.full_like(av, float(g) / size))
        return self._record(np.float64(np.mean(av)), back)

    def gather_rows(self, a, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)
        av = _value(a)

        def back(g):
            if isinstance(a, Var):
                if a.grad is None:
                    a.grad = np.zeros_like(av)
                np.add.at(a.grad, idx, g)
        return self._record(av[idx], back)

    def pair_inner(self, z, pairs) -> Var:
        """Inner-product decoder scores: out[k] = z[i_k] . z[j_k]."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        zv = _value(z)
        i, j = pairs[:, 0], pairs[:, 1]
        out_val = np.einsum("kd,kd->k", zv[i], zv[j])

        def back(g):
            if isinstance(z, Var):
                if z.grad is None:
                    z.grad = np.zeros_like(zv)
                np.add.at(z.grad, i, g[:, None] * zv[j])
                np.add.at(z.grad, j, g[:, None] * zv[i])
        return self._record(out_val, back)

    def softmax_cross_entropy(self, logits, labels) -> Var:
        """Mean cross-entropy of row-wise softmax against integer labels."""
        lv = _value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        shifted = lv - lv.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        n = lv.shape[0]
        loss = -log_probs[np.arange(n), labels].mean()
        probs = np.exp(log_probs)

        def back(g):
            if isinstance(logits, Var):
                delta = probs.copy()
                delta[np.arange(n), labels] -= 1.0
                _accumulate(logits, (float(g) / n) * delta)
        return self._record(np.float64(loss), back)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Var) -> GradientBundle:
        """Reverse sweep from a scalar loss; returns named leaf gradients.

        May be called repeatedly on the same tape with different recorded
        scalars (gradients are reset at entry, not accumulated across calls).
        """
        if np.shape(loss.value) != ():
            raise DifferentiationError(
                f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        if not np.isfinite(loss.value):
            raise DifferentiationError("loss is not finite")
        for var in self._order:
            var.grad = None
        for op in self._tracked.values():
            op.reset()
        loss.grad = np.float64(1.0)
        for var in reversed(self._order):
            if var.grad is not None and var._back is not None:
                var._back(var.grad)
        bundle = GradientBundle()
        for name, leaf in self._leaves.items():
            bundle.params[name] = (leaf.grad if leaf.grad is not None
                                   else np.zeros_like(leaf.value))
        for name, op in self._tracked.items():
            bundle.adjacency[name] = op.adjacency_grad()
        return bundle


def record_forward(fn) -> tuple[float, Tape, Var]:
    """Run ``fn(tape)`` on a fresh tape; the returned value must be scalar."""
    tape = Tape()
    loss = fn(tape)
    if not isinstance(loss, Var) or np.shape(loss.value) != ():
        raise DifferentiationError("recorded expression must produce a scalar Var")
    return float(loss.value), tape, loss


def backward(tape: Tape, loss: Var) -> GradientBundle:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(loss_fn, x0: np.ndarray, analytic: np.ndarray,
                      epsilon: float = 1e-5, signature_fn=None):
    """Compare an analytic gradient against central differences.

    ``loss_fn(x)`` evaluates the scalar loss at a flattened parameter
    vector; ``signature_fn(x)``, when given, returns an array of ReLU
    pre-activations whose sign pattern must match between the two probes,
    otherwise the coordinate is skipped (kink policy). Returns
    (max_relative_error, skipped_coordinates).
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != x0.shape:
        raise DifferentiationError("analytic gradient shape mismatch")
    worst = 0.0
    skipped = []
    for k in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[k] += epsilon
        xm[k] -= epsilon
        if signature_fn is not None:
            sp_ = np.sign(signature_fn(xp))
            sm_ = np.sign(signature_fn(xm))
            if not np.array_equal(sp_, sm_):
                skipped.append(k)
                continue
        fp, fm = loss_fn(xp), loss_fn(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DifferentiationError(f"non-finite loss at probe coordinate {k}")
        numeric = (fp - fm) / (2.0 * epsilon)
        denom = max(abs(analytic[k]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[k] - numeric) / denom)
    return worst, skipped

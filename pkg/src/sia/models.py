"""Surrogate and victim models: classifiers, link predictors, and training.

Classifiers: gcn (2-layer, symmetric-normalized propagation), sgc (K
propagation steps then one linear map), sage (mean-neighbor aggregation
with self-concatenation, 2 layers, ReLU after the first). Link
predictors: gae / vgae encoders with the inner-product decoder.

Forward passes run on an autodiff tape so the same code serves training,
attack gradients, and plain evaluation. The host feature block may be a
sparse matrix; the payload block is small and dense.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape, TrackedAdjacency, Var
from .graph import Graph, PoisonedGraph, normalize_adjacency

CLASSIFIER_ARCHS = ("gcn", "sgc", "sage")
PREDICTOR_ARCHS = ("gae", "vgae")

PROB_EPS = 1e-7
DEFAULT_HIDDEN_CLS = 64
DEFAULT_HIDDEN_PRED = 16
DEFAULT_EMBED = 32
SGC_HOPS = 2


class ModelError(ValueError):
    """Bad architecture tags or mismatched shapes."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite; carries step diagnostics."""


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ClassifierParams:
    arch: str
    weights: list
    hidden: int
    num_classes: int
    k_hops: int = SGC_HOPS

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.arch, [w.copy() for w in self.weights],
                                self.hidden, self.num_classes, self.k_hops)


@dataclass
class LinkPredictorParams:
    arch: str
    weights: list
    hidden: int
    embed_dim: int

    def copy(self) -> "LinkPredictorParams":
        return LinkPredictorParams(self.arch, [w.copy() for w in self.weights],
                                   self.hidden, self.embed_dim)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray                # (N, C), pre-softmax

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)  # argmax breaks ties at the lowest index


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_classifier(arch: str, num_features: int, num_classes: int,
                    hidden: int = DEFAULT_HIDDEN_CLS, seed: int = 0,
                    k_hops: int = SGC_HOPS) -> ClassifierParams:
    if arch not in CLASSIFIER_ARCHS:
        raise ModelError(f"unknown classifier arch {arch!r}")
    rng = np.random.default_rng(seed)
    if arch == "gcn":
        weights = [_glorot(rng, num_features, hidden), _glorot(rng, hidden, num_classes)]
    elif arch == "sgc":
        weights = [_glorot(rng, num_features, num_classes)]
    else:  # sage: separate self/neighbor maps per layer
        weights = [_glorot(rng, num_features, hidden), _glorot(rng, num_features, hidden),
                   _glorot(rng, hidden, num_classes), _glorot(rng, hidden, num_classes)]
    return ClassifierParams(arch, weights, hidden, num_classes, k_hops)


def init_link_predictor(arch: str, num_features: int, hidden: int = DEFAULT_HIDDEN_PRED,
                        embed_dim: int = DEFAULT_EMBED, seed: int = 0) -> LinkPredictorParams:
    if arch not in PREDICTOR_ARCHS:
        raise ModelError(f"unknown predictor arch {arch!r}")
    rng = np.random.default_rng(seed)
    if arch == "gae":
        weights = [_glorot(rng, num_features, hidden), _glorot(rng, hidden, embed_dim)]
    else:  # vgae: shared first layer, parallel mu / logvar heads
        weights = [_glorot(rng, num_features, hidden),
                   _glorot(rng, hidden, embed_dim), _glorot(rng, hidden, embed_dim)]
    return LinkPredictorParams(arch, weights, hidden, embed_dim)


# ---------------------------------------------------------------------------
# graph views
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphView:
    """What a model consumes: a message graph plus split feature blocks."""

    adjacency: sp.csr_matrix
    host_features: object             # (N_o, D) csr or ndarray, constant
    payload_features: object = None   # (n_V, D) ndarray / tape Var, or None

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


def _sparse_features(features) -> object:
    """Keep large, mostly-zero feature blocks sparse for fast products."""
    if sp.issparse(features):
        return features.tocsr()
    arr = np.asarray(features, dtype=np.float64)
    if arr.size > 65536 and np.count_nonzero(arr) < 0.25 * arr.size:
        return sp.csr_matrix(arr)
    return arr


def view_of_graph(g: Graph) -> GraphView:
    return GraphView(g.adjacency, _sparse_features(g.features), None)


def view_of_poisoned(g_p: PoisonedGraph, links=()) -> GraphView:
    """View of the poisoned graph, optionally with recommendation links applied."""
    adj = g_p.adjacency()
    if links:
        adj = adjacency_with_links(adj, links)
    return GraphView(adj, _sparse_features(g_p.host.features),
                     g_p.payload.features)


def adjacency_with_links(adjacency: sp.csr_matrix, links) -> sp.csr_matrix:
    """Return a copy of the adjacency with symmetric entries for each link."""
    links = list(links)
    if not links:
        return adjacency
    rows = [i for i, j in links] + [j for i, j in links]
    cols = [j for i, j in links] + [i for i, j in links]
    extra = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=adjacency.shape)
    out = (adjacency + extra).tocsr()
    if out.nnz != adjacency.nnz + len(rows):
        raise ModelError("a link duplicates an existing edge")
    return out


def mean_aggregation_operator(adjacency: sp.csr_matrix) -> sp.csr_matrix:
    """Row-normalized neighbor averaging D^-1 A; isolated rows stay zero."""
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sp.diags(inv) @ adjacency).tocsr()


# ---------------------------------------------------------------------------
# tape forwards
# ---------------------------------------------------------------------------

def _input_linear(tape: Tape, view: GraphView, w) -> Var:
    """(host | payload) @ W with the host block kept constant."""
    top = tape.matmul(view.host_features, w)
    if view.payload_features is None:
        return top
    bottom = tape.matmul(view.payload_features, w)
    return tape.vstack(top, bottom)


def classifier_logits(tape: Tape, params: ClassifierParams, view: GraphView,
                      weights=None, operator=None) -> Var:
    """Pre-softmax logits for any classifier arch.

    ``weights`` may be tape Vars (training / attack) or None to use the
    stored constants; ``operator`` may be a TrackedAdjacency to expose
    adjacency gradients, otherwise the normalized operator is built here.
    """
    w = weights if weights is not None else params.weights
    if params.arch in ("gcn", "sgc"):
        m = operator if operator is not None else normalize_adjacency(view.adjacency)
        if params.arch == "gcn":
            h = tape.relu(tape.spmm(m, _input_linear(tape, view, w[0])))
            return tape.spmm(m, tape.matmul(h, w[1]))
        h = tape.spmm(m, _input_linear(tape, view, w[0]))
        for _ in range(params.k_hops - 1):
            h = tape.spmm(m, h)
        return h
    if params.arch == "sage":
        if operator is not None:
            raise ModelError("adjacency gradients are only supported for gcn/sgc")
        p = mean_aggregation_operator(view.adjacency)
        x_self = _input_linear(tape, view, w[0])
        x_neigh = tape.spmm(p, _input_linear(tape, view, w[1]))
        h = tape.relu(tape.add(x_self, x_neigh))
        return tape.add(tape.matmul(h, w[2]), tape.spmm(p, tape.matmul(h, w[3])))
    raise ModelError(f"unknown classifier arch {params.arch!r}")


def encoder_embeddings(tape: Tape, params: LinkPredictorParams, view: GraphView,
                       weights=None, operator=None, noise: np.ndarray | None = None):
    """Node embeddings Z and the KL term (zero for gae).

    vgae samples Z = mu + sigma * noise when ``noise`` is given (training)
    and returns Z = mu when it is None (evaluation).
    """
    w = weights if weights is not None else params.weights
    m = operator if operator is not None else normalize_adjacency(view.adjacency)
    h = tape.relu(tape.spmm(m, _input_linear(tape, view, w[0])))
    if params.arch == "gae":
        z = tape.spmm(m, tape.matmul(h, w[1]))
        return z, None
    mu = tape.spmm(m, tape.matmul(h, w[1]))
    logvar = tape.spmm(m, tape.matmul(h, w[2]))
    if noise is not None:
        sigma = tape.exp(tape.scale(logvar, 0.5))
        z = tape.add(mu, tape.mul(sigma, noise))
    else:
        z = mu
    # KL = -1/2 * mean over nodes of sum_d(1 + logvar - mu^2 - sigma^2)
    n = view.num_nodes
    inner = tape.sub(tape.add(1.0, logvar), tape.add(tape.square(mu), tape.exp(logvar)))
    kl = tape.scale(tape.sum(inner), -0.5 / n)
    return z, kl


def decode_pairs(tape: Tape, z, pairs) -> Var:
    """Clamped edge probabilities sigmoid(z_i . z_j) for a pair list."""
    return tape.clamp(tape.sigmoid(tape.pair_inner(z, pairs)), PROB_EPS, 1.0 - PROB_EPS)


def reconstruction_loss(tape: Tape, z, pos_pairs, neg_pairs,
                        average: bool = True) -> Var:
    """Negative log-likelihood of positives and sampled negatives.

    -sum log p(pos) - sum log (1 - p(neg)); divided by the number of
    positives when ``average`` (the training convention), or left as the
    raw sum (the attack objective's form).
    """
    n_pos = np.asarray(pos_pairs).reshape(-1, 2).shape[0]
    p_pos = decode_pairs(tape, z, pos_pairs)
    p_neg = decode_pairs(tape, z, neg_pairs)
    pos_term = tape.sum(tape.log(p_pos))
    neg_term = tape.sum(tape.log(tape.sub(1.0, p_neg)))
    return tape.scale(tape.add(pos_term, neg_term),
                      -1.0 / n_pos if average else -1.0)


def masked_cross_entropy(tape: Tape, logits: Var, labels: np.ndarray,
                         mask: np.ndarray) -> Var:
    """Mean softmax cross-entropy over the masked nodes."""
    idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise ModelError("classification loss needs a non-empty mask")
    return tape.softmax_cross_entropy(tape.gather_rows(logits, idx), labels[idx])


# ---------------------------------------------------------------------------
# plain evaluation wrappers
# ---------------------------------------------------------------------------

def classify(view: GraphView, params: ClassifierParams) -> Prediction:
    """Deterministic forward pass; logits returned pre-softmax."""
    _check_feature_dim(view, params.weights[0].shape[0], params.arch)
    tape = Tape()
    logits = classifier_logits(tape, params, view)
    return Prediction(np.asarray(logits.value))


def encode_links(view: GraphView, params: LinkPredictorParams, seed: int = 0,
                 training: bool = False):
    """Embeddings (and KL value for vgae); deterministic in evaluation mode."""
    tape = Tape()
    noise = None
    if training and params.arch == "vgae":
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((view.num_nodes, params.embed_dim))
    z, kl = encoder_embeddings(tape, params, view, noise=noise)
    return np.asarray(z.value), (float(kl.value) if kl is not None else 0.0)


def decode_scores(z: np.ndarray, pairs) -> np.ndarray:
    """sigmoid(z_i . z_j) per pair; strictly inside (0, 1)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    raw = np.einsum("kd,kd->k", z[pairs[:, 0]], z[pairs[:, 1]])
    return 1.0 / (1.0 + np.exp(-raw))


def recon_loss(pos_scores, neg_scores, q: int) -> float:
    """Reconstruction loss from already-decoded probabilities."""
    pos = np.clip(np.asarray(pos_scores, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    neg = np.clip(np.asarray(neg_scores, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    if neg.size != q * pos.size:
        raise ModelError(f"expected {q} negatives per positive")
    return float((-np.log(pos).sum() - np.log1p(-neg).sum()) / pos.size)


def cls_train_loss(pred: Prediction, labels: np.ndarray, mask: np.ndarray) -> float:
    """Mean softmax cross-entropy of a prediction over the masked nodes."""
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
    if idx.size == 0:
        raise ModelError("classification loss needs a non-empty mask")
    logits = pred.logits[idx]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(idx.size), labels[idx]].mean())


def _check_feature_dim(view: GraphView, expected: int, arch: str) -> None:
    d = view.host_features.shape[1]
    if d != expected:
        raise ModelError(f"{arch} expects {expected} input features, view has {d}")


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Per-parameter adaptive steps; optional decoupled L2 on the gradient."""

    def __init__(self, shapes, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _weight_names(n: int) -> list[str]:
    return [f"w{i}" for i in range(n)]


def classifier_training_step(params: ClassifierParams, adam: Adam, view: GraphView,
                             labels: np.ndarray, mask: np.ndarray,
                             operator=None) -> float:
    tape = Tape()
    names = _weight_names(len(params.weights))
    w_vars = [tape.leaf(w, name) for w, name in zip(params.weights, names)]
    logits = classifier_logits(tape, params, view, weights=w_vars, operator=operator)
    loss = masked_cross_entropy(tape, logits, labels, mask)
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"classifier loss non-finite at adam step {adam.t}")
    bundle = tape.backward(loss)
    adam.step(params.weights, [bundle.params[n] for n in names])
    return float(loss.value)


def predictor_training_step(params: LinkPredictorParams, adam: Adam, view: GraphView,
                            positives: np.ndarray, negatives: np.ndarray,
                            noise: np.ndarray | None = None,
                            operator=None) -> float:
    tape = Tape()
    names = _weight_names(len(params.weights))
    w_vars = [tape.leaf(w, name) for w, name in zip(params.weights, names)]
    z, kl = encoder_embeddings(tape, params, view, weights=w_vars,
                               operator=operator, noise=noise)
    loss = reconstruction_loss(tape, z, positives, negatives)
    if kl is not None:
        loss = tape.add(loss, kl)
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"predictor loss non-finite at adam step {adam.t}")
    bundle = tape.backward(loss)
    adam.step(params.weights, [bundle.params[n] for n in names])
    return float(loss.value)


def train_classifier(view: GraphView, labels: np.ndarray, mask: np.ndarray,
                     arch: str = "gcn", hidden: int = DEFAULT_HIDDEN_CLS,
                     steps: int = 200, lr: float = 0.01, weight_decay: float = 5e-4,
                     seed: int = 0) -> ClassifierParams:
    """Train a fresh classifier on the given view (full-batch)."""
    num_classes = int(labels.max()) + 1
    d = view.host_features.shape[1]
    params = init_classifier(arch, d, num_classes, hidden=hidden, seed=seed)
    adam = Adam([w.shape for w in params.weights], lr=lr, weight_decay=weight_decay)
    operator = (normalize_adjacency(view.adjacency)
                if arch in ("gcn", "sgc") else None)
    for _ in range(steps):
        classifier_training_step(params, adam, view, labels, mask,
                                 operator=operator)
    return params


def train_link_predictor(view: GraphView, positives: np.ndarray, negative_sampler,
                         arch: str = "gae", hidden: int = DEFAULT_HIDDEN_PRED,
                         embed_dim: int = DEFAULT_EMBED,
                         steps: int = 200, lr: float = 0.01, seed: int = 0
                         ) -> LinkPredictorParams:
    """Train a fresh link predictor; ``negative_sampler(rng)`` supplies
    fresh negatives every step."""
    d = view.host_features.shape[1]
    params = init_link_predictor(arch, d, hidden=hidden, embed_dim=embed_dim, seed=seed)
    adam = Adam([w.shape for w in params.weights], lr=lr)
    rng = np.random.default_rng(seed)
    operator = normalize_adjacency(view.adjacency)
    for _ in range(steps):
        negatives = negative_sampler(rng)
        noise = (rng.standard_normal((view.num_nodes, embed_dim))
                 if arch == "vgae" else None)
        predictor_training_step(params, adam, view, positives, negatives, noise,
                                operator=operator)
    return params


def train_inner(classifier: ClassifierParams, predictor: LinkPredictorParams,
                cls_adam: Adam, pred_adam: Adam, g_p_view: GraphView,
                g_r_view: GraphView, positives: np.ndarray, negative_sampler,
                labels: np.ndarray, mask: np.ndarray, steps: int,
                rng: np.random.Generator, pred_operator=None,
                cls_operator=None) -> tuple[float, float]:
    """One inner round: N warm-start steps for each surrogate.

    The predictor fits the poisoned graph's reconstruction objective; the
    classifier fits the training labels on the recommendation-updated view.
    Parameters and optimizer state carry across rounds. Returns the final
    (predictor, classifier) losses.
    """
    pred_loss = cls_loss = float("nan")
    for _ in range(steps):
        negatives = negative_sampler(rng)
        noise = (rng.standard_normal((g_p_view.num_nodes, predictor.embed_dim))
                 if predictor.arch == "vgae" else None)
        pred_loss = predictor_training_step(predictor, pred_adam, g_p_view,
                                            positives, negatives, noise,
                                            operator=pred_operator)
        cls_loss = classifier_training_step(classifier, cls_adam, g_r_view,
                                            labels, mask, operator=cls_operator)
    return pred_loss, cls_loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_params(params, path) -> None:
    """Flat little-endian float64 blob plus a JSON shape/arch sidecar."""
    path = Path(path)
    blob = np.concatenate([w.ravel() for w in params.weights]).astype("<f8")
    path.with_suffix(".bin").write_bytes(blob.tobytes())
    kind = "classifier" if isinstance(params, ClassifierParams) else "predictor"
    meta = {"kind": kind, "arch": params.arch,
            "shapes": [list(w.shape) for w in params.weights]}
    if kind == "classifier":
        meta.update(hidden=params.hidden, num_classes=params.num_classes,
                    k_hops=params.k_hops)
    else:
        meta.update(hidden=params.hidden, embed_dim=params.embed_dim)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_params(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    weights = []
    offset = 0
    for shape in meta["shapes"]:
        size = int(np.prod(shape))
        weights.append(blob[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != blob.size:
        raise ModelError("checkpoint blob size does not match sidecar shapes")
    if meta["kind"] == "classifier":
        return ClassifierParams(meta["arch"], weights, meta["hidden"],
                                meta["num_classes"], meta["k_hops"])
    return LinkPredictorParams(meta["arch"], weights, meta["hidden"], meta["embed_dim"])

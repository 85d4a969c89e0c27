"""Bi-level subgraph optimization against the dual surrogates.

Alternating schedule over outer epochs: the surrogates take N warm-start
steps each, then even epochs swap one payload edge along the combined
adjacency gradient and odd epochs take a projected gradient step on the
payload features. The payload never gains a stored edge to the host;
links to the target exist only inside the hypothetical updated view the
classifier surrogate is trained on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tape
from .graph import (EdgeSplit, Graph, GraphError, PoisonedGraph, Subgraph,
                    compose_poisoned, edge_key_set, edge_split,
                    normalize_adjacency, sample_nonedges)
from .models import (Adam, ClassifierParams, GraphView, LinkPredictorParams,
                     TrainingDiverged, adjacency_with_links, classifier_logits,
                     classifier_training_step, classify, decode_scores,
                     encoder_embeddings, init_classifier, init_link_predictor,
                     predictor_training_step, reconstruction_loss,
                     train_classifier, view_of_graph)

ABLATION_VARIANTS = ("full", "wo_cls", "wo_link", "wo_str", "wo_feat")


class AttackError(ValueError):
    """Invalid attack configuration or preconditions."""


@dataclass
class AttackConfig:
    """All attack hyperparameters and the run seed."""

    subgraph_nodes: int = 5                 # payload size n_V
    subgraph_edges: int | None = None       # payload edge budget n_E; None = density match
    alpha: float = 1.0                      # link-loss balance
    beta: float = 1.0                       # structure-gradient balance
    lr_feat: float = 1.0                    # feature step size
    inner_steps: int = 5                    # surrogate steps per outer epoch
    outer_epochs: int = 200
    swaps_per_step: int = 1
    k: int = 3                              # recommendation count
    negatives_per_positive: int = 1         # Q
    lr_models: float = 0.01
    hidden_classifier: int = 64
    hidden_predictor: int = 16
    embed_dim: int = 32
    weight_decay: float = 5e-4              # classifier surrogate regularization
    pretrain_steps: int = 200               # clean classifier for attack labels
    convergence_tol: float = 1e-5
    convergence_window: int = 10
    surrogate_warmup: int = 0               # optional surrogate steps before the loop
    seed: int = 0

    def validate(self) -> None:
        max_edges = self.subgraph_nodes * (self.subgraph_nodes - 1) // 2
        if self.subgraph_nodes < 1:
            raise AttackError("payload must have at least one node")
        if self.subgraph_edges is not None and not (0 <= self.subgraph_edges <= max_edges):
            raise AttackError(
                f"edge budget {self.subgraph_edges} outside [0, {max_edges}]")
        for name in ("alpha", "beta", "lr_feat", "lr_models"):
            if getattr(self, name) < 0:
                raise AttackError(f"{name} must be non-negative")
        for name in ("inner_steps", "outer_epochs", "swaps_per_step"):
            if getattr(self, name) < 0:
                raise AttackError(f"{name} must be non-negative")
        for name in ("k", "negatives_per_positive"):
            if getattr(self, name) < 1:
                raise AttackError(f"{name} must be positive")

    def resolved_edges(self, host: Graph) -> int:
        """Edge budget: explicit, else matched to the host's average degree."""
        max_edges = self.subgraph_nodes * (self.subgraph_nodes - 1) // 2
        if self.subgraph_edges is not None:
            return self.subgraph_edges
        avg_degree = 2.0 * host.num_edges / max(host.num_nodes, 1)
        guess = int(round(avg_degree * self.subgraph_nodes / 2.0))
        return int(np.clip(guess, 1, max(max_edges - 1, 1)))


@dataclass(frozen=True)
class AttackLabel:
    target: int
    y_atk: int


@dataclass
class AttackResult:
    payload: Subgraph
    trace: list
    label: AttackLabel | None
    epochs_run: int
    converged: bool
    failure: str | None = None


# ---------------------------------------------------------------------------
# labels and update steps
# ---------------------------------------------------------------------------

def attack_label(clean_classifier: ClassifierParams, g_o: Graph,
                 target: int) -> AttackLabel:
    """Adversarial class: the clean model's second-ranked class at the target."""
    if clean_classifier.num_classes < 2:
        raise AttackError("attack labels need at least two classes")
    pred = classify(view_of_graph(g_o), clean_classifier)
    logits = pred.logits[target]
    order = np.lexsort((np.arange(logits.size), -logits))
    return AttackLabel(target=target, y_atk=int(order[1]))


def feature_step(payload: Subgraph, grad: np.ndarray, lr: float,
                 feature_box: tuple[np.ndarray, np.ndarray]) -> Subgraph:
    """Projected gradient step on the payload features; adjacency untouched."""
    if grad.shape != payload.features.shape:
        raise AttackError(f"feature gradient shape {grad.shape} != payload "
                          f"{payload.features.shape}")
    lo, hi = feature_box
    payload.features = np.clip(payload.features - lr * grad, lo, hi)
    return payload


def structure_step(payload: Subgraph, link_grad: np.ndarray, cls_grad: np.ndarray,
                   beta: float, swaps: int = 1) -> tuple[Subgraph, int]:
    """Edge swaps along the combined adjacency gradient, budget preserved.

    Adds the absent position with the most negative combined gradient and
    removes the present position with the most positive one; a swap only
    happens when it strictly decreases the first-order estimate. Returns
    the payload and the number of swaps applied.
    """
    n = payload.num_nodes
    for g in (link_grad, cls_grad):
        if g.shape != (n, n):
            raise AttackError("adjacency gradients must be n_V x n_V")
    combined = link_grad + beta * cls_grad
    combined = 0.5 * (combined + combined.T)
    applied = 0
    iu, ju = np.triu_indices(n, k=1)
    for _ in range(max(swaps, 0)):
        if iu.size == 0:
            break
        present = payload.adjacency[iu, ju] > 0
        if not present.any() or present.all():
            break  # one half of the swap has no candidates
        grads = combined[iu, ju]
        add_pool = np.flatnonzero(~present)
        rem_pool = np.flatnonzero(present)
        add_at = add_pool[np.argmin(grads[add_pool])]
        rem_at = rem_pool[np.argmax(grads[rem_pool])]
        if grads[add_at] >= grads[rem_at]:
            break  # no first-order improvement available
        ai, aj = int(iu[add_at]), int(ju[add_at])
        ri, rj = int(iu[rem_at]), int(ju[rem_at])
        payload.adjacency[ai, aj] = payload.adjacency[aj, ai] = 1.0
        payload.adjacency[ri, rj] = payload.adjacency[rj, ri] = 0.0
        applied += 1
    return payload, applied


def init_payload(host: Graph, n_nodes: int, n_edges: int,
                 rng: np.random.Generator) -> Subgraph:
    """Random payload: features copied from host rows, uniform random edges."""
    rows = rng.choice(host.num_nodes, size=n_nodes, replace=False)
    features = host.features[rows].copy()
    adjacency = np.zeros((n_nodes, n_nodes))
    iu, ju = np.triu_indices(n_nodes, k=1)
    if n_edges > iu.size:
        raise AttackError(f"edge budget {n_edges} exceeds {iu.size} possible pairs")
    if n_edges:
        chosen = rng.choice(iu.size, size=n_edges, replace=False)
        adjacency[iu[chosen], ju[chosen]] = 1.0
        adjacency += adjacency.T
    return Subgraph(adjacency=adjacency, features=features, edge_budget=n_edges)


# ---------------------------------------------------------------------------
# attack loss
# ---------------------------------------------------------------------------

@dataclass
class AttackLossResult:
    total: float
    cls_term: float
    link_term: float
    tape: Tape
    total_var: object
    cls_var: object
    link_var: object


def attack_loss(g_p: PoisonedGraph, links, classifier: ClassifierParams,
                predictor: LinkPredictorParams, label: AttackLabel | None,
                candidate_pairs: np.ndarray, negatives: np.ndarray,
                alpha: float, msg_adjacency: sp.csr_matrix | None = None,
                variant: str = "full") -> AttackLossResult:
    """Record the combined attack objective on a fresh tape.

    The link term treats the target-to-payload candidate pairs as
    reconstruction positives on the poisoned graph; the classification
    term is the cross-entropy toward the attack label on the updated
    view. Payload features and both propagation operators' payload
    blocks are differentiable leaves.
    """
    if variant not in ABLATION_VARIANTS:
        raise AttackError(f"unknown ablation variant {variant!r}")
    tape = Tape()
    fs = tape.leaf(g_p.payload.features, name="payload_features")
    tracked_ids = g_p.payload_ids()
    host_x = _host_features(g_p)

    link_var = cls_var = None
    if variant != "wo_link":
        adj_p = msg_adjacency if msg_adjacency is not None else g_p.adjacency()
        op_pred = tape.track_adjacency(adj_p, tracked_ids, name="predictor")
        view_p = GraphView(adj_p, host_x, fs)
        z, _ = encoder_embeddings(tape, predictor, view_p, operator=op_pred)
        link_var = reconstruction_loss(tape, z, candidate_pairs, negatives,
                                       average=False)
    if variant != "wo_cls":
        if label is None:
            raise AttackError("classification term needs an attack label")
        adj_r = adjacency_with_links(g_p.adjacency(), links)
        op_cls = tape.track_adjacency(adj_r, tracked_ids, name="classifier")
        view_r = GraphView(adj_r, host_x, fs)
        logits = classifier_logits(tape, classifier, view_r, operator=op_cls)
        row = tape.gather_rows(logits, np.array([label.target]))
        cls_var = tape.softmax_cross_entropy(row, np.array([label.y_atk]))

    if cls_var is None:
        total_var = tape.scale(link_var, alpha)
    elif link_var is None:
        total_var = cls_var
    else:
        total_var = tape.add(cls_var, tape.scale(link_var, alpha))

    if not np.isfinite(total_var.value):
        raise TrainingDiverged("attack loss is non-finite")
    return AttackLossResult(
        total=float(total_var.value),
        cls_term=float(cls_var.value) if cls_var is not None else 0.0,
        link_term=float(link_var.value) if link_var is not None else 0.0,
        tape=tape, total_var=total_var, cls_var=cls_var, link_var=link_var)


def _host_features(g_p: PoisonedGraph):
    from .models import _sparse_features
    return _sparse_features(g_p.host.features)


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------

def ablation_variant(variant: str):
    """Validate a variant tag and return the attack procedure bound to it."""
    if variant not in ABLATION_VARIANTS:
        raise AttackError(f"unknown ablation variant {variant!r}; "
                          f"expected one of {ABLATION_VARIANTS}")

    def procedure(g_o, target, config, **kwargs):
        return run_lisa(g_o, target, config, variant=variant, **kwargs)

    return procedure


def run_lisa(g_o: Graph, target: int, config: AttackConfig, variant: str = "full",
             clean_classifier: ClassifierParams | None = None,
             split: EdgeSplit | None = None) -> AttackResult:
    """Optimize a payload subgraph for one target.

    Pretrains the attack label, initializes a random payload and both
    surrogates once, then alternates structure (even epochs) and feature
    (odd epochs) updates around the inner surrogate training rounds.
    On divergence the best payload seen so far is returned together with
    a failure record.
    """
    config.validate()
    if variant not in ABLATION_VARIANTS:
        raise AttackError(f"unknown ablation variant {variant!r}")
    if not (0 <= target < g_o.num_nodes):
        raise AttackError(f"target {target} out of range")

    ss = np.random.SeedSequence(config.seed)
    seeds = ss.generate_state(6)
    rng_init = np.random.default_rng(seeds[0])
    rng_train = np.random.default_rng(seeds[1])
    rng_attack = np.random.default_rng(seeds[2])

    if split is None:
        split = edge_split(g_o, train_frac=0.85, label_frac=0.5, seed=int(seeds[3]))
    if clean_classifier is None and variant != "wo_cls":
        clean_classifier = train_classifier(
            view_of_graph(g_o), g_o.labels, g_o.train_mask, arch="gcn",
            hidden=config.hidden_classifier, steps=config.pretrain_steps,
            lr=config.lr_models, weight_decay=config.weight_decay,
            seed=int(seeds[4]))
    label = (attack_label(clean_classifier, g_o, target)
             if variant != "wo_cls" else None)

    n_e = config.resolved_edges(g_o)
    payload = init_payload(g_o, config.subgraph_nodes, n_e, rng_init)
    box = g_o.feature_box()
    g_p = compose_poisoned(g_o, payload)
    n_o = g_o.num_nodes
    payload_ids = g_p.payload_ids()

    classifier = init_classifier("gcn", g_o.num_features, g_o.num_classes,
                                 hidden=config.hidden_classifier, seed=int(seeds[5]))
    predictor = init_link_predictor("gae", g_o.num_features,
                                    hidden=config.hidden_predictor,
                                    embed_dim=config.embed_dim, seed=int(seeds[5]) + 1)
    cls_adam = Adam([w.shape for w in classifier.weights], lr=config.lr_models,
                    weight_decay=config.weight_decay)
    pred_adam = Adam([w.shape for w in predictor.weights], lr=config.lr_models)

    host_x = _host_features(g_p)
    host_msg = _edges_csr(split.train_edges, n_o)
    labels_pad = _padded_labels(g_o, payload.num_nodes)
    mask_pad = _padded_mask(g_o, payload.num_nodes)
    candidate_pairs = np.stack(
        [np.full(payload_ids.shape, target), payload_ids], axis=1)

    trace: list[dict] = []
    totals: list[float] = []
    best_payload = payload.copy()
    best_total = math.inf
    failure = None
    converged = False
    epochs_run = 0

    structure_dirty = True
    msg_adj = msg_op = edge_keys = None
    adj_r = op_r = None
    prev_links: tuple | None = None

    try:
        # the inner problems are argmins: bring both surrogates near their
        # optimum on the initial payload before the first outer update
        if config.surrogate_warmup > 0 and config.outer_epochs > 0:
            msg_adj = _poisoned_message_adjacency(host_msg, payload, n_o)
            msg_op = normalize_adjacency(msg_adj)
            edge_keys = edge_key_set(g_p)
            positives = payload_positives(split.positive_labels, payload, n_o)
            view_pred = GraphView(msg_adj, host_x, payload.features)
            links0 = _choose_links(variant, view_pred, msg_op, predictor,
                                   target, payload_ids, config.k)
            adj_r0 = adjacency_with_links(g_p.adjacency(), links0)
            op_r0 = normalize_adjacency(adj_r0)
            view_cls0 = GraphView(adj_r0, host_x, payload.features)
            for _ in range(config.surrogate_warmup):
                if variant != "wo_link":
                    negs = sample_nonedges(
                        g_p.num_nodes, edge_keys,
                        config.negatives_per_positive * positives.shape[0],
                        rng_train)
                    predictor_training_step(predictor, pred_adam, view_pred,
                                            positives, negs, None,
                                            operator=msg_op)
                if variant != "wo_cls":
                    classifier_training_step(classifier, cls_adam, view_cls0,
                                             labels_pad, mask_pad,
                                             operator=op_r0)

        for epoch in range(1, config.outer_epochs + 1):
            epochs_run = epoch
            if structure_dirty:
                msg_adj = _poisoned_message_adjacency(host_msg, payload, n_o)
                msg_op = normalize_adjacency(msg_adj)
                edge_keys = edge_key_set(g_p)
                # the predictor reconstructs the poisoned graph: its payload
                # edges are supervision positives alongside the host split
                positives = payload_positives(split.positive_labels, payload, n_o)
                prev_links = None  # force the updated view to rebuild
                structure_dirty = False

            view_pred = GraphView(msg_adj, host_x, payload.features)
            links = _choose_links(variant, view_pred, msg_op, predictor, target,
                                  payload_ids, config.k)
            if links != prev_links:
                adj_r = adjacency_with_links(g_p.adjacency(), links)
                op_r = normalize_adjacency(adj_r)
                prev_links = links
            view_cls = GraphView(adj_r, host_x, payload.features)

            for _ in range(config.inner_steps):
                if variant != "wo_link":
                    negs = sample_nonedges(
                        g_p.num_nodes, edge_keys,
                        config.negatives_per_positive * positives.shape[0],
                        rng_train)
                    predictor_training_step(predictor, pred_adam, view_pred,
                                            positives, negs, None,
                                            operator=msg_op)
                if variant != "wo_cls":
                    classifier_training_step(classifier, cls_adam, view_cls,
                                             labels_pad, mask_pad, operator=op_r)

            attack_negs = sample_nonedges(
                g_p.num_nodes, edge_keys,
                config.negatives_per_positive * candidate_pairs.shape[0],
                rng_attack)
            result = attack_loss(g_p, links, classifier, predictor, label,
                                 candidate_pairs, attack_negs, config.alpha,
                                 msg_adjacency=msg_adj, variant=variant)

            phase = _phase(epoch, variant)
            if phase == "structure":
                zero = np.zeros((payload.num_nodes,) * 2)
                link_g = (result.tape.backward(result.link_var)
                          .adjacency["predictor"]
                          if result.link_var is not None else zero)
                cls_g = (result.tape.backward(result.cls_var)
                         .adjacency["classifier"]
                         if result.cls_var is not None else zero)
                _, applied = structure_step(payload, link_g, cls_g, config.beta,
                                            config.swaps_per_step)
                if applied:
                    structure_dirty = True
            else:
                bundle = result.tape.backward(result.total_var)
                feature_step(payload, bundle.params["payload_features"],
                             config.lr_feat, box)

            trace.append({"epoch": epoch, "phase": phase,
                          "cls_term": result.cls_term,
                          "link_term": result.link_term,
                          "total": result.total})
            totals.append(result.total)
            if result.total < best_total:
                best_total = result.total
                best_payload = payload.copy()

            w = config.convergence_window
            if len(totals) > w:
                ref = totals[-w - 1]
                if abs(totals[-1] - ref) / max(abs(ref), 1e-12) < config.convergence_tol:
                    converged = True
                    break
    except (TrainingDiverged, GraphError) as exc:
        failure = f"{type(exc).__name__}: {exc}"
        payload = best_payload

    payload.validate()
    return AttackResult(payload=payload, trace=trace, label=label,
                        epochs_run=epochs_run, converged=converged,
                        failure=failure)


def _phase(epoch: int, variant: str) -> str:
    if variant == "wo_str":
        return "feature"
    if variant == "wo_feat":
        return "structure"
    return "structure" if epoch % 2 == 0 else "feature"


def _choose_links(variant, view_pred, msg_op, predictor, target, payload_ids,
                  k) -> tuple:
    """Training-time adversarial links: the top payload nodes by current scores."""
    if variant == "wo_cls" or payload_ids.size == 0:
        return ()
    take = min(k, payload_ids.size)
    if variant == "wo_link":
        return tuple((target, int(i)) for i in payload_ids[:take])
    tape = Tape()
    z, _ = encoder_embeddings(tape, predictor, view_pred, operator=msg_op)
    zv = np.asarray(z.value)
    pairs = np.stack([np.full(payload_ids.shape, target), payload_ids], axis=1)
    scores = decode_scores(zv, pairs)
    order = np.lexsort((payload_ids, -scores))[:take]
    return tuple((target, int(payload_ids[i])) for i in order)


def _poisoned_message_adjacency(host_msg: sp.csr_matrix, payload: Subgraph,
                                n_o: int) -> sp.csr_matrix:
    if payload.num_nodes == 0:
        return host_msg
    return sp.bmat([[host_msg, None],
                    [None, sp.csr_matrix(payload.adjacency)]], format="csr")


def payload_positives(host_positives: np.ndarray, payload: Subgraph,
                      n_o: int) -> np.ndarray:
    """Host supervision positives plus the payload's own edges (global ids)."""
    if payload.num_edges == 0:
        return host_positives
    ii, jj = np.nonzero(np.triu(payload.adjacency, k=1))
    extra = np.stack([ii + n_o, jj + n_o], axis=1)
    return np.vstack([host_positives, extra])


def _edges_csr(edges: np.ndarray, n: int) -> sp.csr_matrix:
    if edges.size == 0:
        return sp.csr_matrix((n, n))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def _padded_labels(g_o: Graph, n_payload: int) -> np.ndarray:
    if n_payload == 0:
        return g_o.labels
    return np.concatenate([g_o.labels, np.zeros(n_payload, dtype=np.int64)])


def _padded_mask(g_o: Graph, n_payload: int) -> np.ndarray:
    if n_payload == 0:
        return g_o.train_mask
    return np.concatenate([g_o.train_mask, np.zeros(n_payload, dtype=bool)])

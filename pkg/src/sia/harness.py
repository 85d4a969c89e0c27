"""Experiment orchestration: run attacks over sampled targets, retrain
victims per target, aggregate LSR/ASR, and persist results.

Per-target work is independent and runs on a bounded worker pool; every
random choice derives from the master seed and the target's position, so
aggregates are reproducible regardless of scheduling. results.csv contains
no timings and is byte-stable across identical runs.
"""

from __future__ import annotations

import itertools
import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (ABLATION_VARIANTS, AttackConfig, AttackError, run_lisa)
from .baselines import CopyPayload, NiaConfig, NiaResult, graph_copy, nia_attack
from .graph import (EdgeSplit, Graph, GraphError, PoisonedGraph, Subgraph,
                    compose_poisoned, edge_split, load_dataset,
                    negative_sampler_for)
from .models import (GraphView, adjacency_with_links, classify, encode_links,
                     train_classifier, train_link_predictor, view_of_graph,
                     view_of_poisoned, _sparse_features)
from .recommender import Recommendation, apply_recommendation, link_scores, recommend_top_k

ATTACK_TAGS = ("lisa", "graphcopy", "nia", "none")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    dataset: str = ""
    recommender: str = "gae"
    classifier: str = "gcn"
    attack: str = "lisa"
    variant: str = "full"
    num_targets: int = 100
    k: int = 3
    seed: int = 0
    out_dir: str | None = None
    label_frac: float = 0.05
    edge_train_frac: float = 0.85
    victim_steps: int = 200
    workers: int = 1
    retain_payloads: bool = False
    nia_lsr: float = 1.0
    nia_steps: int = 200
    nia_lr: float = 0.1
    graphcopy_hops: int = 2
    graphcopy_noise: float = 0.1
    attack_config: AttackConfig = field(default_factory=AttackConfig)

    def validate(self) -> None:
        if self.attack not in ATTACK_TAGS:
            raise ConfigError(f"unknown attack tag {self.attack!r}")
        if self.recommender not in ("gae", "vgae"):
            raise ConfigError(f"unknown recommender tag {self.recommender!r}")
        if self.classifier not in ("gcn", "sgc", "sage"):
            raise ConfigError(f"unknown classifier tag {self.classifier!r}")
        if self.variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {self.variant!r}")
        if self.num_targets < 1:
            raise ConfigError("num_targets must be at least 1")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if not (0.0 <= self.nia_lsr <= 1.0):
            raise ConfigError("nia lsr must be in [0, 1]")
        self.attack_config.validate()

    def echo(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "attack_config"}
        d["attack_config"] = dict(self.attack_config.__dict__)
        return d


@dataclass
class TargetResult:
    target: int
    link_success: bool
    n_links: int
    clean_pred: int
    attacked_pred: int
    true_label: int
    misclassified: bool
    attack_seconds: float = 0.0
    eval_seconds: float = 0.0
    failure: str | None = None
    trace: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    lsr: float                        # percent
    asr: float                        # percent
    results: list
    n_failed: int
    payloads: dict = field(default_factory=dict)   # target -> Subgraph
    wall_seconds: float = 0.0

    def ok_results(self) -> list:
        return [r for r in self.results if r.failure is None]


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------

_PURPOSES = dict(labels=0, split=1, surrogate=2, clean_victim=3, targets=4,
                 similarity=5)


def derived_seed(master: int, purpose: str, index: int = 0) -> int:
    """Stable per-purpose seed independent of scheduling order."""
    ss = np.random.SeedSequence((master, _PURPOSES[purpose], index))
    return int(ss.generate_state(1)[0])


def target_seed(master: int, idx: int, slot: int) -> int:
    ss = np.random.SeedSequence((master, 100 + slot, idx))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# target sampling and evaluation
# ---------------------------------------------------------------------------

def sample_targets(g: Graph, m: int, seed: int) -> np.ndarray:
    """Uniform victim sample without replacement, excluding labelled nodes."""
    eligible = np.flatnonzero(~g.train_mask)
    if m > eligible.size:
        raise ConfigError(
            f"cannot sample {m} targets from {eligible.size} eligible nodes")
    rng = np.random.default_rng(seed)
    return eligible[rng.choice(eligible.size, size=m, replace=False)]


@dataclass
class SharedState:
    """Objects shared read-only by every target evaluation."""

    graph: Graph
    split: EdgeSplit
    surrogate_classifier: object
    clean_victim: object
    clean_prediction: object


def prepare_shared(config: ExperimentConfig, graph: Graph | None = None
                   ) -> SharedState:
    """Dataset-level pre-work: the edge split, the attacker's pretrained
    clean classifier, and the clean victim used for reference predictions."""
    if graph is None:
        graph, _ = load_dataset(config.dataset, label_frac=config.label_frac,
                                seed=derived_seed(config.seed, "labels"))
    split = edge_split(graph, train_frac=config.edge_train_frac, label_frac=0.5,
                       seed=derived_seed(config.seed, "split"))
    ac = config.attack_config
    surrogate = train_classifier(
        view_of_graph(graph), graph.labels, graph.train_mask, arch="gcn",
        hidden=ac.hidden_classifier, steps=ac.pretrain_steps, lr=ac.lr_models,
        weight_decay=ac.weight_decay, seed=derived_seed(config.seed, "surrogate"))
    clean_victim = train_classifier(
        view_of_graph(graph), graph.labels, graph.train_mask,
        arch=config.classifier, steps=config.victim_steps,
        seed=derived_seed(config.seed, "clean_victim"))
    clean_pred = classify(view_of_graph(graph), clean_victim)
    return SharedState(graph, split, surrogate, clean_victim, clean_pred)


def _train_victim_predictor(g_p: PoisonedGraph, split: EdgeSplit, config,
                            seed: int):
    """Victim recommender trained on the poisoned graph.

    The message graph is the split's training edges plus the payload's
    internal edges; the payload edges join the supervision positives
    (the predictor reconstructs the graph it is given). Returns the
    trained predictor and its training view.
    """
    from .attack import _edges_csr, _poisoned_message_adjacency, payload_positives
    n_o = g_p.host.num_nodes
    host_msg = _edges_csr(split.train_edges, n_o)
    msg_adj = _poisoned_message_adjacency(host_msg, g_p.payload, n_o)
    view = GraphView(msg_adj, _sparse_features(g_p.host.features),
                     g_p.payload.features)
    positives = payload_positives(split.positive_labels, g_p.payload, n_o)
    sampler = negative_sampler_for(g_p, 1, positives)
    params = train_link_predictor(view, positives, sampler,
                                  arch=config.recommender,
                                  steps=config.victim_steps, seed=seed)
    return params, view


def evaluate_target(shared: SharedState, payload: Subgraph | None, target: int,
                    config: ExperimentConfig, idx: int,
                    nia: NiaResult | None = None) -> TargetResult:
    """Full victim pipeline for one target: compose, recommend, classify."""
    t0 = time.perf_counter()
    g = shared.graph
    true_label = int(g.labels[target])
    clean_pred = int(shared.clean_prediction.predicted[target])

    if nia is not None:
        links = [nia.link] if nia.link_formed else []
        adj = adjacency_with_links(nia.poisoned.adjacency(), links)
        view = GraphView(adj, _sparse_features(g.features),
                         nia.poisoned.payload.features)
        victim = train_classifier(view, _pad_labels(g, 1), _pad_mask(g, 1),
                                  arch=config.classifier,
                                  steps=config.victim_steps,
                                  seed=target_seed(config.seed, idx, 2))
        attacked = int(classify(view, victim).predicted[target])
        return TargetResult(
            target=int(target), link_success=bool(links), n_links=len(links),
            clean_pred=clean_pred, attacked_pred=attacked,
            true_label=true_label, misclassified=attacked != true_label,
            eval_seconds=time.perf_counter() - t0)

    if payload is None:  # clean pipeline: no payload, nothing to recommend
        attacked = clean_pred
        return TargetResult(
            target=int(target), link_success=False, n_links=0,
            clean_pred=clean_pred, attacked_pred=attacked,
            true_label=true_label, misclassified=attacked != true_label,
            eval_seconds=time.perf_counter() - t0)

    g_p = compose_poisoned(g, payload)
    predictor, pred_view = _train_victim_predictor(
        g_p, shared.split, config, target_seed(config.seed, idx, 1))
    candidates, scores = link_scores(g_p, predictor, int(target),
                                     view=pred_view)
    rec = recommend_top_k(int(target), candidates, scores, config.k,
                          g.num_nodes)
    view_r = apply_recommendation(g_p, rec)
    victim = train_classifier(view_r, _pad_labels(g, payload.num_nodes),
                              _pad_mask(g, payload.num_nodes),
                              arch=config.classifier, steps=config.victim_steps,
                              seed=target_seed(config.seed, idx, 2))
    attacked = int(classify(view_r, victim).predicted[target])
    return TargetResult(
        target=int(target), link_success=rec.link_success,
        n_links=rec.num_links, clean_pred=clean_pred, attacked_pred=attacked,
        true_label=true_label, misclassified=attacked != true_label,
        eval_seconds=time.perf_counter() - t0)


def run_target(shared: SharedState, target: int, config: ExperimentConfig,
               idx: int) -> tuple[TargetResult, Subgraph | None]:
    """Attack then evaluate one target; failures become result records."""
    t0 = time.perf_counter()
    payload = None
    nia = None
    trace: list = []
    try:
        if config.attack == "lisa":
            ac = replace(config.attack_config, k=config.k,
                         seed=target_seed(config.seed, idx, 0))
            res = run_lisa(shared.graph, int(target), ac, variant=config.variant,
                           clean_classifier=shared.surrogate_classifier,
                           split=shared.split)
            if res.failure:
                raise AttackError(res.failure)
            payload = res.payload
            trace = res.trace
        elif config.attack == "graphcopy":
            payload = graph_copy(shared.graph, int(target),
                                 hops=config.graphcopy_hops,
                                 noise_frac=config.graphcopy_noise,
                                 seed=target_seed(config.seed, idx, 0)).subgraph
        elif config.attack == "nia":
            nia = nia_attack(shared.graph, int(target),
                             NiaConfig(lsr=config.nia_lsr,
                                       feature_steps=config.nia_steps,
                                       feature_lr=config.nia_lr,
                                       seed=target_seed(config.seed, idx, 0)),
                             shared.surrogate_classifier)
        attack_seconds = time.perf_counter() - t0
        result = evaluate_target(shared, payload, int(target), config, idx,
                                 nia=nia)
        result.attack_seconds = attack_seconds
        result.trace = trace
        if nia is not None:
            payload = nia.poisoned.payload
        return result, payload
    except Exception as exc:  # record the failure, keep the run going
        return TargetResult(
            target=int(target), link_success=False, n_links=0, clean_pred=-1,
            attacked_pred=-1, true_label=int(shared.graph.labels[target]),
            misclassified=False, attack_seconds=time.perf_counter() - t0,
            failure=f"{type(exc).__name__}: {exc}"), None


def _pad_labels(g: Graph, n_extra: int) -> np.ndarray:
    return (np.concatenate([g.labels, np.zeros(n_extra, dtype=np.int64)])
            if n_extra else g.labels)


def _pad_mask(g: Graph, n_extra: int) -> np.ndarray:
    return (np.concatenate([g.train_mask, np.zeros(n_extra, dtype=bool)])
            if n_extra else g.train_mask)


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

_POOL_CTX: dict = {}


def _pool_init():
    try:  # keep BLAS single-threaded inside workers
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except Exception:
        pass


def _pool_task(args):
    idx, target = args
    shared = _POOL_CTX["shared"]
    config = _POOL_CTX["config"]
    return idx, run_target(shared, target, config, idx)


def run_experiment(config: ExperimentConfig, graph: Graph | None = None
                   ) -> ExperimentResult:
    """Run the configured attack over sampled targets and aggregate.

    LSR and ASR are arithmetic means (in percent) over targets that
    completed; failed targets are counted and excluded.
    """
    config.validate()
    t0 = time.perf_counter()
    shared = prepare_shared(config, graph)
    targets = sample_targets(shared.graph, config.num_targets,
                             derived_seed(config.seed, "targets"))

    pairs: list = [None] * len(targets)
    if config.workers > 1:
        _POOL_CTX["shared"] = shared
        _POOL_CTX["config"] = config
        with ProcessPoolExecutor(max_workers=config.workers,
                                 initializer=_pool_init) as pool:
            for idx, out in pool.map(_pool_task, list(enumerate(targets))):
                pairs[idx] = out
        _POOL_CTX.clear()
    else:
        for idx, target in enumerate(targets):
            pairs[idx] = run_target(shared, target, config, idx)

    results = [p[0] for p in pairs]
    payloads = {r.target: p[1] for r, p in zip(results, pairs)
                if p[1] is not None and r.failure is None}
    ok = [r for r in results if r.failure is None]
    n_failed = len(results) - len(ok)
    lsr = 100.0 * float(np.mean([r.link_success for r in ok])) if ok else 0.0
    asr = 100.0 * float(np.mean([r.misclassified for r in ok])) if ok else 0.0
    result = ExperimentResult(
        config=config, lsr=lsr, asr=asr, results=results, n_failed=n_failed,
        payloads=payloads if config.retain_payloads else {},
        wall_seconds=time.perf_counter() - t0)
    if config.out_dir:
        write_outputs(result, Path(config.out_dir))
    return result


def run_attack_only(shared: SharedState, target: int, config: ExperimentConfig,
                    idx: int) -> Subgraph | None:
    """Produce a payload without the victim pipeline (similarity runs)."""
    if config.attack == "lisa":
        ac = replace(config.attack_config, k=config.k,
                     seed=target_seed(config.seed, idx, 0))
        res = run_lisa(shared.graph, int(target), ac, variant=config.variant,
                       clean_classifier=shared.surrogate_classifier,
                       split=shared.split)
        return None if res.failure else res.payload
    if config.attack == "graphcopy":
        return graph_copy(shared.graph, int(target), hops=config.graphcopy_hops,
                          noise_frac=config.graphcopy_noise,
                          seed=target_seed(config.seed, idx, 0)).subgraph
    if config.attack == "nia":
        res = nia_attack(shared.graph, int(target),
                         NiaConfig(lsr=config.nia_lsr,
                                   feature_steps=config.nia_steps,
                                   feature_lr=config.nia_lr,
                                   seed=target_seed(config.seed, idx, 0)),
                         shared.surrogate_classifier)
        return res.poisoned.payload
    return None


def _pool_attack_task(args):
    idx, target = args
    shared = _POOL_CTX["shared"]
    config = _POOL_CTX["config"]
    return idx, run_attack_only(shared, target, config, idx)


def collect_payloads(config: ExperimentConfig, graph: Graph | None = None,
                     targets=None) -> tuple[SharedState, dict]:
    """Run the configured attack over targets, keeping only the payloads."""
    config.validate()
    shared = prepare_shared(config, graph)
    if targets is None:
        targets = sample_targets(shared.graph, config.num_targets,
                                 derived_seed(config.seed, "targets"))
    payloads: dict = {}
    if config.workers > 1:
        _POOL_CTX["shared"] = shared
        _POOL_CTX["config"] = config
        with ProcessPoolExecutor(max_workers=config.workers,
                                 initializer=_pool_init) as pool:
            for idx, payload in pool.map(_pool_attack_task,
                                         list(enumerate(targets))):
                if payload is not None:
                    payloads[int(targets[idx])] = payload
        _POOL_CTX.clear()
    else:
        for idx, target in enumerate(targets):
            payload = run_attack_only(shared, target, config, idx)
            if payload is not None:
                payloads[int(target)] = payload
    return shared, payloads


# ---------------------------------------------------------------------------
# similarity analysis
# ---------------------------------------------------------------------------

@dataclass
class SimilarityReport:
    samples: list                     # (target, payload_node, cosine)
    bin_edges: np.ndarray             # width 0.05 over [-1, 1]
    counts: np.ndarray
    skipped: int

    @property
    def mean(self) -> float:
        return float(np.mean([s[2] for s in self.samples])) if self.samples else 0.0

    @property
    def peak(self) -> float:
        """Center of the fullest histogram bin."""
        i = int(np.argmax(self.counts))
        return float(0.5 * (self.bin_edges[i] + self.bin_edges[i + 1]))


def similarity_analysis(g_o: Graph, payloads: dict, seed: int,
                        split: EdgeSplit | None = None,
                        steps: int = 200) -> SimilarityReport:
    """Cosine similarity between targets and their payload nodes under a
    recommender trained on the clean graph.

    ``payloads`` maps target id to Subgraph. Pairs with a zero-norm
    embedding are skipped and counted.
    """
    if split is None:
        split = edge_split(g_o, 0.85, 0.5, seed=seed)
    from .attack import _edges_csr
    host_msg = _edges_csr(split.train_edges, g_o.num_nodes)
    view = GraphView(host_msg, _sparse_features(g_o.features), None)
    sampler = negative_sampler_for(g_o, 1, split.positive_labels)
    gae = train_link_predictor(view, split.positive_labels, sampler, arch="gae",
                               steps=steps, seed=seed)

    samples = []
    skipped = 0
    from .attack import _poisoned_message_adjacency
    for target, payload in sorted(payloads.items()):
        g_p = compose_poisoned(g_o, payload)
        msg = _poisoned_message_adjacency(host_msg, payload, g_o.num_nodes)
        z, _ = encode_links(GraphView(msg, view.host_features, payload.features), gae)
        zt = z[target]
        nt = np.linalg.norm(zt)
        for i in range(payload.num_nodes):
            zi = z[g_o.num_nodes + i]
            ni = np.linalg.norm(zi)
            if nt == 0.0 or ni == 0.0:
                skipped += 1
                continue
            samples.append((int(target), i, float(zt @ zi / (nt * ni))))

    edges = np.round(np.arange(-1.0, 1.0 + 1e-9, 0.05), 10)
    counts, _ = np.histogram([s[2] for s in samples], bins=edges)
    return SimilarityReport(samples=samples, bin_edges=edges, counts=counts,
                            skipped=skipped)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

_ATTACK_KEYS = {"alpha", "beta", "subgraph_nodes", "subgraph_edges", "lr_feat",
                "inner_steps", "outer_epochs", "swaps_per_step",
                "negatives_per_positive"}
_EXPERIMENT_KEYS = {"k", "num_targets", "nia_lsr", "recommender", "classifier",
                    "attack", "variant", "victim_steps"}


def sweep(base: ExperimentConfig, grid: dict, graph: Graph | None = None) -> list[dict]:
    """Run one experiment per grid cell; cell failures are recorded rows."""
    for key in grid:
        if key not in _ATTACK_KEYS | _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown sweep parameter {key!r}")
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = dict(zip(keys, values))
        config = replace(base, attack_config=replace(base.attack_config))
        config.out_dir = None
        for k, v in cell.items():
            if k in _ATTACK_KEYS:
                setattr(config.attack_config, k, v)
            else:
                setattr(config, k, v)
            if k == "k":
                config.attack_config.k = v
        row = dict(cell)
        try:
            res = run_experiment(config, graph)
            row.update(lsr=res.lsr, asr=res.asr, n_failed=res.n_failed, error="")
        except Exception as exc:
            row.update(lsr=float("nan"), asr=float("nan"), n_failed=-1,
                       error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ("target", "link_success", "n_links", "clean_pred",
                  "attacked_pred", "true_label", "misclassified")


def artifact_version() -> str:
    """git-describe-style version string for summaries."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"sia {__version__}+g{out.stdout.strip()}"
    except Exception:
        pass
    return f"sia {__version__}"


def write_results_csv(results: list, path: Path) -> None:
    lines = [",".join(RESULT_COLUMNS)]
    for r in results:
        if r.failure is not None:
            continue
        lines.append(",".join(str(int(v)) for v in (
            r.target, r.link_success, r.n_links, r.clean_pred,
            r.attacked_pred, r.true_label, r.misclassified)))
    path.write_text("\n".join(lines) + "\n")


def write_outputs(result: ExperimentResult, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(result.results, out_dir / "results.csv")

    ok = result.ok_results()
    summary = {
        "lsr_percent": result.lsr,
        "asr_percent": result.asr,
        "num_targets": len(result.results),
        "num_failed": result.n_failed,
        "failures": [{"target": r.target, "error": r.failure}
                     for r in result.results if r.failure is not None],
        "config": result.config.echo(),
        "version": artifact_version(),
        "wall_seconds": result.wall_seconds,
        "mean_attack_seconds": (float(np.mean([r.attack_seconds for r in ok]))
                                if ok else 0.0),
        "mean_eval_seconds": (float(np.mean([r.eval_seconds for r in ok]))
                              if ok else 0.0),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    with (out_dir / "timings.csv").open("w") as f:
        f.write("target,attack_seconds,eval_seconds\n")
        for r in result.results:
            f.write(f"{r.target},{r.attack_seconds:.6f},{r.eval_seconds:.6f}\n")

    traces = [r for r in result.results if r.trace]
    if traces:
        trace_dir = out_dir / "trace"
        trace_dir.mkdir(exist_ok=True)
        for r in traces:
            with (trace_dir / f"{r.target}.jsonl").open("w") as f:
                for rec in r.trace:
                    f.write(json.dumps(rec) + "\n")

    if result.payloads:
        payload_dir = out_dir / "payloads"
        payload_dir.mkdir(exist_ok=True)
        for target, payload in sorted(result.payloads.items()):
            np.savez(payload_dir / f"{target}.npz",
                     adjacency=payload.adjacency, features=payload.features,
                     edge_budget=payload.edge_budget)


def load_payloads(payload_dir: Path) -> dict:
    payloads = {}
    for f in sorted(Path(payload_dir).glob("*.npz")):
        data = np.load(f)
        payloads[int(f.stem)] = Subgraph(
            adjacency=data["adjacency"], features=data["features"],
            edge_budget=int(data["edge_budget"]))
    return payloads


def write_similarity(report: SimilarityReport, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "similarity.csv").open("w") as f:
        f.write("target,payload_node,cosine\n")
        for t, i, c in report.samples:
            f.write(f"{t},{i},{c:.9f}\n")
    with (out_dir / "similarity_hist.csv").open("w") as f:
        f.write("bin_left,bin_right,count\n")
        for i, c in enumerate(report.counts):
            f.write(f"{report.bin_edges[i]:.2f},{report.bin_edges[i + 1]:.2f},{int(c)}\n")


def write_sweep(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    keys = [k for k in rows[0] if k not in ("lsr", "asr", "n_failed", "error")]
    header = keys + ["lsr", "asr", "n_failed", "error"]
    with Path(path).open("w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(row[k]) for k in header) + "\n")

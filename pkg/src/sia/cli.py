"""Command-line interface.

Commands: attack (single target), experiment (full LSR/ASR run), sweep,
similarity, validate-dataset, report. A JSON config file can mirror any
flag (underscored keys); explicit flags override the file. Exit codes:
0 success, 1 config error, 2 dataset error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # config errors exit 1, not argparse's 2
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: _Parser) -> None:
    p.add_argument("--dataset", help="neutral-format dataset directory")
    p.add_argument("--recommender", choices=["gae", "vgae"])
    p.add_argument("--classifier", choices=["gcn", "sgc", "sage"])
    p.add_argument("--attack", choices=["lisa", "graphcopy", "nia", "none"])
    p.add_argument("--variant",
                   choices=["full", "wo_cls", "wo_link", "wo_str", "wo_feat"])
    p.add_argument("--targets", type=int, help="number of victim nodes")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--alpha", type=float, help="link-loss balance")
    p.add_argument("--beta", type=float, help="structure-gradient balance")
    p.add_argument("--subgraph-nodes", type=int, dest="subgraph_nodes")
    p.add_argument("--subgraph-edges", type=int, dest="subgraph_edges")
    p.add_argument("--k", type=int, help="recommended links per target")
    p.add_argument("--lsr", type=float, help="link probability for the nia attack")
    p.add_argument("--epochs", type=int, help="attack outer epochs")
    p.add_argument("--victim-steps", type=int, dest="victim_steps")
    p.add_argument("--workers", type=int, help="parallel target workers")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file mirroring these flags")


_EXPERIMENT_KEYS = {"dataset", "recommender", "classifier", "attack", "variant",
                    "targets", "seed", "k", "lsr", "victim_steps", "workers",
                    "out"}
_ATTACK_KEYS = {"alpha", "beta", "subgraph_nodes", "subgraph_edges", "epochs"}


def build_experiment_config(args):
    """defaults < config file < explicit flags."""
    from .harness import ConfigError, ExperimentConfig

    merged: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            merged.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
    for key in _EXPERIMENT_KEYS | _ATTACK_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value

    config = ExperimentConfig()
    rename = {"targets": "num_targets", "lsr": "nia_lsr", "out": "out_dir"}
    attack_rename = {"epochs": "outer_epochs"}
    for key, value in merged.items():
        if key in _ATTACK_KEYS or key in attack_rename.values():
            setattr(config.attack_config, attack_rename.get(key, key), value)
        elif key in rename:
            setattr(config, rename[key], value)
        elif hasattr(config, key):
            setattr(config, key, value)
        elif hasattr(config.attack_config, key):
            setattr(config.attack_config, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    config.attack_config.k = config.k
    if not config.dataset:
        raise ConfigError("a dataset directory is required (--dataset)")
    config.validate()
    return config


def _load_graph(config):
    from .graph import GraphError, load_dataset
    from .harness import derived_seed
    try:
        graph, meta = load_dataset(config.dataset, label_frac=config.label_frac,
                                   seed=derived_seed(config.seed, "labels"))
    except (GraphError, OSError, ValueError) as exc:
        raise DatasetFailure(str(exc))
    return graph, meta


class DatasetFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_attack(args) -> int:
    from .attack import run_lisa
    from .baselines import NiaConfig, graph_copy, nia_attack
    from .harness import prepare_shared, target_seed
    config = build_experiment_config(args)
    graph, _ = _load_graph(config)
    target = args.target
    if not (0 <= target < graph.num_nodes):
        from .harness import ConfigError
        raise ConfigError(f"target {target} out of range")
    out = Path(config.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)

    shared = prepare_shared(config, graph)
    seed = target_seed(config.seed, 0, 0)
    trace = []
    if config.attack in ("lisa", "none"):
        ac = replace(config.attack_config, k=config.k, seed=seed)
        res = run_lisa(graph, target, ac, variant=config.variant,
                       clean_classifier=shared.surrogate_classifier,
                       split=shared.split)
        payload, trace = res.payload, res.trace
        info = {"attack": "lisa", "variant": config.variant,
                "target": target, "y_atk": res.label.y_atk if res.label else None,
                "epochs_run": res.epochs_run, "converged": res.converged,
                "failure": res.failure}
    elif config.attack == "graphcopy":
        cp = graph_copy(graph, target, hops=config.graphcopy_hops,
                        noise_frac=config.graphcopy_noise, seed=seed)
        payload = cp.subgraph
        info = {"attack": "graphcopy", "target": target, "anchor": cp.anchor}
    else:
        res = nia_attack(graph, target,
                         NiaConfig(lsr=config.nia_lsr, feature_steps=config.nia_steps,
                                   feature_lr=config.nia_lr, seed=seed),
                         shared.surrogate_classifier)
        payload = res.poisoned.payload
        info = {"attack": "nia", "target": target, "link_formed": res.link_formed,
                "y_atk": res.y_atk}

    np.savez(out / "payload.npz", adjacency=payload.adjacency,
             features=payload.features, edge_budget=payload.edge_budget)
    with (out / "trace.jsonl").open("w") as f:
        for rec in trace:
            f.write(json.dumps(rec) + "\n")
    (out / "attack.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"payload: {payload.num_nodes} nodes, {payload.num_edges} edges "
          f"-> {out / 'payload.npz'}")
    return 0


def cmd_experiment(args) -> int:
    from .harness import run_experiment
    config = build_experiment_config(args)
    graph, _ = _load_graph(config)
    result = run_experiment(config, graph)
    print(f"{config.attack} on {config.dataset}: LSR {result.lsr:.1f}% | "
          f"ASR {result.asr:.1f}% over {len(result.results)} targets "
          f"({result.n_failed} failed, {result.wall_seconds:.1f}s)")
    if config.out_dir:
        print(f"wrote {Path(config.out_dir) / 'results.csv'}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import ConfigError, sweep, write_sweep
    config = build_experiment_config(args)
    graph, _ = _load_graph(config)
    grid = {}
    for spec_str in args.grid:
        if "=" not in spec_str:
            raise ConfigError(f"grid spec {spec_str!r} must look like key=v1,v2")
        key, _, values = spec_str.partition("=")
        grid[key.strip()] = [_parse_value(v) for v in values.split(",") if v]
    rows = sweep(config, grid, graph)
    out = Path(config.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(rows, out / "sweep.csv")
    print(f"swept {len(rows)} cells -> {out / 'sweep.csv'}")
    return 0


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def cmd_similarity(args) -> int:
    from .harness import (collect_payloads, similarity_analysis,
                          write_similarity)
    config = build_experiment_config(args)
    graph, _ = _load_graph(config)
    shared, payloads = collect_payloads(config, graph)
    report = similarity_analysis(graph, payloads,
                                 seed=_similarity_seed(config),
                                 split=shared.split)
    out = Path(config.out_dir or ".")
    write_similarity(report, out)
    print(f"{len(report.samples)} pairs, mean cosine {report.mean:.3f}, "
          f"peak bin {report.peak:+.3f} -> {out / 'similarity.csv'}")
    return 0


def _similarity_seed(config) -> int:
    from .harness import derived_seed
    return derived_seed(config.seed, "similarity")


def cmd_validate_dataset(args) -> int:
    from .graph import validate_dataset
    report = validate_dataset(args.path)
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 2


def cmd_report(args) -> int:
    from .plots import render_report
    written = render_report(args.results, args.out)
    for path in written:
        print(f"wrote {path}")
    if not written:
        print("no renderable outputs found")
    return 0


def make_parser() -> _Parser:
    parser = _Parser(prog="sia", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", parser_class=_Parser,
                       help="optimize a payload for one target")
    _add_common(p)
    p.add_argument("--target", type=int, required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("experiment", parser_class=_Parser,
                       help="full LSR/ASR run over sampled targets")
    _add_common(p)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("sweep", parser_class=_Parser,
                       help="grid of experiments")
    _add_common(p)
    p.add_argument("--grid", action="append", required=True,
                   metavar="key=v1,v2,...",
                   help="sweep parameter; repeatable")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("similarity", parser_class=_Parser,
                       help="clean-recommender cosine similarity of payloads")
    _add_common(p)
    p.set_defaults(fn=cmd_similarity)

    p = sub.add_parser("validate-dataset", parser_class=_Parser,
                       help="check a neutral-format dataset directory")
    p.add_argument("path")
    p.set_defaults(fn=cmd_validate_dataset)

    p = sub.add_parser("report", parser_class=_Parser,
                       help="render figures from experiment outputs")
    p.add_argument("--results", required=True,
                   help="directory with results.csv / trace / similarity csvs")
    p.add_argument("--out", help="figure output directory (default: results dir)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    from .attack import AttackError
    from .graph import GraphError
    from .harness import ConfigError
    from .models import ModelError, TrainingDiverged
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except AttackError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DatasetFailure as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ModelError, GraphError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Subgraph-injection attacks on GNN systems with a link recommender.

The attack optimizes an isolated payload subgraph so that (i) the
deployed link recommender proposes edges between a victim node and the
payload, and (ii) the victim's classification degrades once those edges
form. Includes the copy-heuristic and single-node-injection baselines
plus an LSR/ASR evaluation harness.
"""

__version__ = "0.1.0"

from .graph import (EdgeSplit, Graph, GraphError, PoisonedGraph, Subgraph,
                    build_graph, compose_poisoned, edge_split, load_dataset,
                    n_hop_neighborhood, normalize_adjacency,
                    sample_negative_edges, validate_dataset)
from .autodiff import (DifferentiationError, GradientBundle, Tape,
                       TrackedAdjacency, finite_diff_check)
from .models import (Adam, ClassifierParams, GraphView, LinkPredictorParams,
                     Prediction, classify, cls_train_loss, decode_scores,
                     encode_links, init_classifier, init_link_predictor,
                     load_params, recon_loss, save_params, train_classifier,
                     train_inner, train_link_predictor)
from .recommender import (Recommendation, apply_recommendation, link_scores,
                          recommend_top_k)
from .attack import (AttackConfig, AttackError, AttackLabel, AttackResult,
                     ablation_variant, attack_label, attack_loss, feature_step,
                     init_payload, run_lisa, structure_step)
from .baselines import CopyPayload, NiaConfig, NiaResult, graph_copy, nia_attack
from .harness import (ExperimentConfig, ExperimentResult, SimilarityReport,
                      TargetResult, evaluate_target, run_experiment,
                      sample_targets, similarity_analysis, sweep)

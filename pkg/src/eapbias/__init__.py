"""Bias-circuit discovery with edge attribution patching on a numpy transformer."""

from .attribution import (AttributionResult, eap_scores, evaluate_baseline, evaluate_corrupt, evaluate_graph,
                          exact_patch_score, exact_patch_scores, metric_change)
from .analysis import (ablation_curve, finetune_stability, layer_histogram, n_top, overlap_matrix, overlap_topk,
                       random_ablation)
from .bundle import load_bundle, load_weights, save_weights
from .config import ModelConfig
from .corpus import ExamplePair, TemplateSpec, Vocabulary, generate_pairs, load_templates
from .debias import DebiasReport, auto_corrupt, debias_forward, delta_bias
from .graph import (CircuitGraph, Edge, Node, build_graph, export_circuit, format_edge, parse_edge,
                    select_circuit, top_k_edges)
from .metrics import BiasMetricSpec, TokenClassLexicon, bias_L1, bias_L2, load_lexicon, metric_gradient
from .model import Weights, backward, fine_tune, forward, forward_patched, init_random

__version__ = "0.1.0"

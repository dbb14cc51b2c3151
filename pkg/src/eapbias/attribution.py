"""Edge attribution patching, exact patching, and circuit evaluation.

For a clean/corrupted pair, the attribution score of edge ``u -> p`` is

    (corrupted output of u - clean output of u) . dL/d(input of port p)

summed over positions and residual dimensions, with the gradient taken on
the clean run. It is the first-order estimate of how much the metric moves
when that one edge carries the corrupted activation; :func:`exact_patch_score`
computes the same quantity by actually rerunning the model. Scores are
averaged over pairs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graph import CircuitGraph, Edge, build_graph
from .metrics import PairMetric
from .model import Weights, backward, forward, forward_patched, graph_patch_plan


@dataclass
class AttributionResult:
    scores: np.ndarray
    n_pairs: int
    graph: CircuitGraph


def pair_tokens(pair) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(clean, corrupt) token tuples from an ExamplePair or a 2-tuple."""
    if hasattr(pair, "clean"):
        clean, corrupt = pair.clean, pair.corrupt
    else:
        clean, corrupt = pair
    clean, corrupt = tuple(int(t) for t in clean), tuple(int(t) for t in corrupt)
    if len(clean) != len(corrupt):
        raise ValueError(f"clean/corrupt length mismatch ({len(clean)} vs {len(corrupt)})")
    return clean, corrupt


def map_pairs(fn: Callable, pairs: Sequence, workers: int) -> list:
    if not pairs:
        raise ValueError("dataset is empty")
    if workers <= 1 or len(pairs) == 1:
        return [fn(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, pairs))


def _pair_edge_scores(weights: Weights, graph: CircuitGraph, metric, pair) -> np.ndarray:
    clean, corrupt = pair_tokens(pair)
    clean_logits, clean_cache = forward(weights, clean, capture=True)
    _, corr_cache = forward(weights, corrupt, capture=True)
    pm = PairMetric(metric, clean_logits)
    grads = backward(weights, clean, pm.gradient(clean_logits), clean_cache)
    delta = corr_cache.contributions - clean_cache.contributions
    by_port = np.einsum("usd,psd->up", delta, grads.ports)
    return by_port[graph.src, graph.port_indices]


def eap_scores(weights: Weights, pairs: Sequence, metric, graph: CircuitGraph | None = None,
               workers: int = 1) -> AttributionResult:
    """Attribution score of every edge, averaged over pairs.

    Two forward passes and one backward pass per pair. The returned graph
    carries the scores and their ranks.
    """
    graph = build_graph(weights.config) if graph is None else graph.copy()
    per_pair = map_pairs(lambda p: _pair_edge_scores(weights, graph, metric, p), list(pairs), workers)
    scores = np.mean(np.stack(per_pair), axis=0)
    graph.set_scores(scores)
    return AttributionResult(scores=graph.scores, n_pairs=len(per_pair), graph=graph)


def exact_patch_score(weights: Weights, pair, metric, edge: Edge) -> float:
    """L(clean | edge carries corrupted value) - L(clean), computed by rerunning."""
    clean, corrupt = pair_tokens(pair)
    clean_logits, _ = forward(weights, clean)
    _, corr_cache = forward(weights, corrupt, capture=True)
    pm = PairMetric(metric, clean_logits)
    patched = forward_patched(weights, clean, corr_cache, [edge])
    return pm(patched) - pm(clean_logits)


def exact_patch_scores(weights: Weights, pairs: Sequence, metric, graph: CircuitGraph | None = None,
                       workers: int = 1) -> np.ndarray:
    """Exact single-edge patch deltas for every edge of ``graph``, averaged over pairs."""
    graph = build_graph(weights.config) if graph is None else graph

    def sweep(pair):
        clean, corrupt = pair_tokens(pair)
        clean_logits, _ = forward(weights, clean)
        _, corr_cache = forward(weights, corrupt, capture=True)
        pm = PairMetric(metric, clean_logits)
        base = pm(clean_logits)
        out = np.empty(len(graph))
        mask = np.zeros(len(graph), dtype=bool)
        for i in range(len(graph)):
            mask[i] = True
            out[i] = pm(forward_patched(weights, clean, corr_cache, graph_patch_plan(graph, mask))) - base
            mask[i] = False
        return out

    return np.mean(np.stack(map_pairs(sweep, list(pairs), workers)), axis=0)


def evaluate_baseline(weights: Weights, pairs: Sequence, metric, workers: int = 1) -> float:
    """Mean metric over the clean runs (nothing patched)."""

    def one(pair):
        clean, _ = pair_tokens(pair)
        logits, _ = forward(weights, clean)
        return PairMetric(metric, logits)(logits)

    return float(np.mean(map_pairs(one, list(pairs), workers)))


def evaluate_graph(weights: Weights, pairs: Sequence, metric, graph: CircuitGraph,
                   workers: int = 1) -> float:
    """Mean metric when every edge outside the circuit carries its corrupted value."""
    plan = graph_patch_plan(graph, ~graph.in_graph)

    def one(pair):
        clean, corrupt = pair_tokens(pair)
        clean_logits, _ = forward(weights, clean)
        _, corr_cache = forward(weights, corrupt, capture=True)
        return PairMetric(metric, clean_logits)(forward_patched(weights, clean, corr_cache, plan))

    return float(np.mean(map_pairs(one, list(pairs), workers)))


def evaluate_corrupt(weights: Weights, pairs: Sequence, metric, workers: int = 1) -> float:
    """Mean metric of the plain corrupted runs, scored under the clean run's top-k policy."""

    def one(pair):
        clean, corrupt = pair_tokens(pair)
        clean_logits, _ = forward(weights, clean)
        return PairMetric(metric, clean_logits)(forward(weights, corrupt)[0])

    return float(np.mean(map_pairs(one, list(pairs), workers)))


def metric_change(baseline: float, circuit_value: float) -> float:
    return abs(baseline - circuit_value)


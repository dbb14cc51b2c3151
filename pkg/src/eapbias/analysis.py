"""Localization and stability summaries of attribution results."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .attribution import eap_scores, evaluate_graph
from .graph import CircuitGraph, format_edge, ranked_indices


def n_top(fraction: float, n_edges: int) -> int:
    """ceil(fraction * n_edges), robust to float noise like 0.1 * 30."""
    return min(n_edges, max(0, math.ceil(round(fraction * n_edges, 9))))


@dataclass
class LayerHistogram:
    counts: np.ndarray  # index n_layers holds edges into logits
    threshold: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def shares(self) -> np.ndarray:
        return self.counts / self.total if self.total else np.zeros(len(self.counts))

    @property
    def flags(self) -> np.ndarray:
        return self.shares > self.threshold

    def rows(self) -> list[tuple[int, int, float, bool]]:
        return [(layer, int(c), float(s), bool(f))
                for layer, (c, s, f) in enumerate(zip(self.counts, self.shares, self.flags))]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "count", "share", "flag"])
            for layer, count, share, flag in self.rows():
                w.writerow([layer, count, repr(share), int(flag)])


def layer_histogram(graph: CircuitGraph, top_fraction: float = 0.05, threshold: float = 0.20) -> LayerHistogram:
    """Bucket the top ``top_fraction`` of edges (by |score|) by destination layer.

    A layer is flagged when its share of the selected edges is strictly
    greater than ``threshold``.
    """
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    selected = ranked_indices(graph)[:n_top(top_fraction, len(graph))]
    layers = graph.dest_layers()[selected]
    counts = np.bincount(layers, minlength=graph.config.n_layers + 1)
    return LayerHistogram(counts=counts, threshold=threshold)


def ablation_curve(weights, pairs, metric, graph: CircuitGraph, fractions: Sequence[float],
                   workers: int = 1) -> list[tuple[float, float]]:
    """Metric after corrupting the top ``f`` fraction of edges, for each ``f``."""
    fractions = list(fractions)
    if not fractions:
        raise ValueError("fractions must not be empty")
    if fractions != sorted(fractions) or fractions[0] < 0 or fractions[-1] > 1:
        raise ValueError("fractions must be ascending values in [0, 1]")
    order = ranked_indices(graph)
    curve = []
    for f in fractions:
        circuit = graph.copy()
        circuit.in_graph[:] = True
        circuit.in_graph[order[:n_top(f, len(graph))]] = False
        curve.append((f, evaluate_graph(weights, pairs, metric, circuit, workers=workers)))
    return curve


def random_ablation(weights, pairs, metric, graph: CircuitGraph, n_edges: int, seed: int,
                    workers: int = 1) -> float:
    """Metric after corrupting ``n_edges`` edges chosen uniformly at random."""
    rng = np.random.default_rng(seed)
    circuit = graph.copy()
    circuit.in_graph[:] = True
    circuit.in_graph[rng.choice(len(graph), size=n_edges, replace=False)] = False
    return evaluate_graph(weights, pairs, metric, circuit, workers=workers)


def write_curve_csv(curve: Sequence[tuple[float, float]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "metric"])
        for f, v in curve:
            w.writerow([repr(float(f)), repr(float(v))])


# --- overlap ------------------------------------------------------------------


def _key(edge) -> str:
    return edge if isinstance(edge, str) else format_edge(edge)


def overlap_topk(a: Sequence, b: Sequence, k: int) -> float:
    """|top-k(a) & top-k(b)| / k for two ranked edge lists (edges or names)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(a) < k or len(b) < k:
        raise ValueError(f"both edge lists need at least k={k} entries (got {len(a)} and {len(b)})")
    return len({_key(e) for e in a[:k]} & {_key(e) for e in b[:k]}) / k


@dataclass
class OverlapMatrix:
    labels: list[str]
    values: np.ndarray

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.labels)
            for label, row in zip(self.labels, self.values):
                w.writerow([label] + [repr(float(v)) for v in row])


def overlap_matrix(named: Mapping[str, Sequence] | Sequence[tuple[str, Sequence]], k: int) -> OverlapMatrix:
    items = list(named.items()) if isinstance(named, Mapping) else list(named)
    if len(items) < 2:
        raise ValueError("overlap_matrix needs at least two configurations")
    n = len(items)
    values = np.eye(n)
    for i in range(n):
        for j in range(i, n):
            values[i, j] = values[j, i] = overlap_topk(items[i][1], items[j][1], k)
    return OverlapMatrix(labels=[name for name, _ in items], values=values)


def finetune_stability(weights_before, weights_after, pairs, metric, k: int, workers: int = 1) -> dict:
    """Attribute the same pairs under two weight sets and compare their top-k edges."""
    if weights_before.config != weights_after.config:
        raise ValueError("weights_before and weights_after have different configs")
    before = eap_scores(weights_before, pairs, metric, workers=workers).graph
    after = eap_scores(weights_after, pairs, metric, workers=workers).graph
    top_before = [before.edge_names[i] for i in ranked_indices(before)[:k]]
    top_after = [after.edge_names[i] for i in ranked_indices(after)[:k]]
    return {
        "k": k,
        "overlap": overlap_topk(top_before, top_after, k),
        "top_before": top_before,
        "top_after": top_after,
    }

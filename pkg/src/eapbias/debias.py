"""Inference-time debiasing by corrupting the top-scoring bias edges."""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attribution import map_pairs, pair_tokens
from .corpus import SLOT, TemplateSpec, Vocabulary
from .graph import CircuitGraph, ranked_indices
from .metrics import PairMetric
from .model import Weights, forward, forward_patched, graph_patch_plan


def default_n(n_edges: int) -> int:
    return math.ceil(0.01 * n_edges)


def _patch_mask(graph: CircuitGraph, n: int, candidates=None) -> np.ndarray:
    if candidates is None:
        pool = ranked_indices(graph)
    else:
        allowed = np.zeros(len(graph), dtype=bool)
        allowed[graph.indices(candidates)] = True
        pool = np.array([i for i in ranked_indices(graph) if allowed[i]], dtype=np.int64)
    if not 0 <= n <= len(pool):
        raise ValueError(f"N={n} must be between 0 and the number of bias edges ({len(pool)})")
    mask = np.zeros(len(graph), dtype=bool)
    mask[pool[:n]] = True
    return mask


def debias_forward(weights: Weights, clean: Sequence[int], corrupt: Sequence[int], graph: CircuitGraph,
                   n: int, candidates=None) -> np.ndarray:
    """Logits of the clean input with its top-``n`` edges (by |score|) fed corrupted values.

    ``candidates`` restricts the bias edges to a subset of the graph.
    """
    if len(clean) != len(corrupt):
        raise ValueError(f"clean/corrupt length mismatch ({len(clean)} vs {len(corrupt)})")
    plan = graph_patch_plan(graph, _patch_mask(graph, n, candidates))
    _, corr_cache = forward(weights, corrupt, capture=True)
    return forward_patched(weights, clean, corr_cache, plan)


@dataclass
class DebiasReport:
    n_edges_patched: int
    bias_clean: float
    bias_patched: float
    delta_percent: float | None
    per_pair: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def delta_bias(weights: Weights, pairs: Sequence, metric, graph: CircuitGraph, n: int,
               candidates=None, workers: int = 1) -> DebiasReport:
    """Percent change in mean bias when the top-``n`` edges are corrupted.

    Negative values are reductions. ``delta_percent`` is ``None`` when the
    clean bias is zero.
    """
    plan = graph_patch_plan(graph, _patch_mask(graph, n, candidates))

    def one(pair):
        clean, corrupt = pair_tokens(pair)
        clean_logits, _ = forward(weights, clean)
        _, corr_cache = forward(weights, corrupt, capture=True)
        pm = PairMetric(metric, clean_logits)
        return {"clean": list(clean), "corrupt": list(corrupt),
                "bias_clean": pm(clean_logits),
                "bias_patched": pm(forward_patched(weights, clean, corr_cache, plan))}

    per_pair = map_pairs(one, list(pairs), workers)
    bias_clean = float(np.mean([r["bias_clean"] for r in per_pair]))
    bias_patched = float(np.mean([r["bias_patched"] for r in per_pair]))
    delta = None if bias_clean == 0 else 100.0 * (bias_patched - bias_clean) / bias_clean
    return DebiasReport(n, bias_clean, bias_patched, delta, per_pair)


def _swap_two(tokens: list[int], seed: int) -> list[int]:
    if len(tokens) < 2:
        return tokens
    i, j = random.Random(seed).sample(range(len(tokens)), 2)
    tokens[i], tokens[j] = tokens[j], tokens[i]
    return tokens


def auto_corrupt(clean: Sequence[int], templates: Mapping[str, TemplateSpec], vocabulary: Vocabulary,
                 seed: int = 0) -> list[int]:
    """Same-length corrupted input for an arbitrary clean token sequence.

    If the input is a registered template with a one-token entity in its
    slot, the slot gets the template's neutral (C2) replacement. Otherwise
    two seeded-random positions are swapped.
    """
    clean = [int(t) for t in clean]
    for spec in templates.values():
        before, after = spec.pattern.split(SLOT)
        head, tail = vocabulary.encode(before), vocabulary.encode(after)
        if len(clean) != len(head) + 1 + len(tail):
            continue
        if clean[:len(head)] == head and clean[len(head) + 1:] == tail:
            replacement = vocabulary.encode(spec.c2)
            if len(replacement) == 1:
                return head + replacement + tail
    return _swap_two(list(clean), seed)

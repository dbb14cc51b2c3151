"""Top-k next-token bias metrics and token classification.

Both metrics look at the k most probable next tokens at the last position:

* ``l1``: probability mass on positive (or male) tokens minus mass on
  negative (or female) tokens among the top k, in [-1, 1];
* ``l2``: probability mass on positive (or male) tokens among the top k,
  in [0, 1].

Probabilities always come from the full-vocabulary softmax. Top-k
membership is piecewise constant in the logits, so gradients are taken with
the top-k set held fixed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import Vocabulary, data_path, split_words
from .model import Weights, forward

logger = logging.getLogger(__name__)

DEFAULT_K = 10
LEXICON_FILES = {"sentiment": ("positive.txt", "negative.txt"), "gender": ("male.txt", "female.txt")}


@dataclass(frozen=True)
class TokenClassLexicon:
    """Positive/negative (sentiment) or male/female (gender) token-id sets.

    In gender mode ``positive`` holds male-stereotypical ids and ``negative``
    female-stereotypical ids; everything else is neutral.
    """

    mode: str
    positive: frozenset[int]
    negative: frozenset[int]

    def __post_init__(self):
        if self.mode not in LEXICON_FILES:
            raise ValueError(f"lexicon mode must be sentiment or gender, got {self.mode!r}")
        object.__setattr__(self, "positive", frozenset(int(i) for i in self.positive))
        object.__setattr__(self, "negative", frozenset(int(i) for i in self.negative))
        overlap = self.positive & self.negative
        if overlap:
            raise ValueError(f"token ids in both classes: {sorted(overlap)}")

    def swapped(self) -> "TokenClassLexicon":
        return TokenClassLexicon(self.mode, self.negative, self.positive)

    def check_vocab(self, vocab_size: int) -> None:
        ids = self.positive | self.negative
        if ids and (min(ids) < 0 or max(ids) >= vocab_size):
            raise ValueError(f"lexicon ids must lie in [0, {vocab_size})")


def _read_words(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def load_lexicon(vocabulary: Vocabulary, mode: str = "sentiment",
                 directory: str | os.PathLike | None = None) -> tuple[TokenClassLexicon, list[str]]:
    """Map ``positive.txt/negative.txt`` or ``male.txt/female.txt`` through ``vocabulary``.

    Multi-token entries are keyed by their first token. Returns the lexicon
    and the entries that did not map to a known token.
    """
    if mode not in LEXICON_FILES:
        raise ValueError(f"lexicon mode must be sentiment or gender, got {mode!r}")
    sets, unmapped = [], []
    for fname in LEXICON_FILES[mode]:
        path = os.path.join(directory, fname) if directory else data_path(fname)
        ids = set()
        for word in _read_words(path):
            toks = split_words(word)
            if toks and toks[0] in vocabulary:
                ids.add(vocabulary.id(toks[0]))
            else:
                unmapped.append(word)
        sets.append(ids)
    if unmapped:
        logger.warning("%d lexicon entries not in vocabulary: %s", len(unmapped), ", ".join(unmapped))
    return TokenClassLexicon(mode, frozenset(sets[0]), frozenset(sets[1] - sets[0])), unmapped


@dataclass(frozen=True)
class BiasMetricSpec:
    """Which metric, the top-k size, the token classes, and the top-k policy.

    With ``freeze_topk`` (the default) every intervention on a pair scores
    the top-k set of that pair's clean run, which is the set the gradient is
    taken over. Without it, each run re-selects its own top k.
    """

    kind: str
    lexicon: TokenClassLexicon
    k: int = DEFAULT_K
    freeze_topk: bool = True
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in ("l1", "l2"):
            raise ValueError(f"metric kind must be l1 or l2, got {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def scaled(self, factor: float) -> "BiasMetricSpec":
        return replace(self, scale=self.scale * factor)


def _last(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits[-1] if logits.ndim == 2 else logits


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def topk_ids(logits, k: int) -> np.ndarray:
    last = _last(logits)
    if k > last.shape[-1]:
        raise ValueError(f"k={k} exceeds vocabulary size {last.shape[-1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    return np.argsort(-last, kind="stable")[:k]


def topk_predictions(logits, k: int = DEFAULT_K) -> list[tuple[int, float]]:
    """The k most probable next tokens at the last position, ties to the lower id."""
    ids = topk_ids(logits, k)
    probs = softmax(_last(logits))
    return [(int(i), float(probs[i])) for i in ids]


def class_weights(spec, topk: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per-token coefficient c_j so that the metric is sum_j c_j * p_j."""
    c = np.zeros(vocab_size)
    lex = spec.lexicon
    for j in topk:
        j = int(j)
        if j in lex.positive:
            c[j] = 1.0
        elif spec.kind == "l1" and j in lex.negative:
            c[j] = -1.0
    return c * spec.scale


def class_masses(logits, spec, topk: np.ndarray | None = None) -> tuple[float, float]:
    """(positive mass, negative mass) over the top-k set, summed in token-id order.

    Each mass is capped at 1.0, which a rounded sum of probabilities can
    otherwise overshoot by an ulp.
    """
    last = _last(logits)
    topk = topk_ids(last, spec.k) if topk is None else topk
    probs = softmax(last)
    pos = neg = 0.0
    for j in sorted(int(t) for t in topk):
        if j in spec.lexicon.positive:
            pos += probs[j]
        elif j in spec.lexicon.negative:
            neg += probs[j]
    return min(float(pos), 1.0), min(float(neg), 1.0)


def metric_value(logits, spec, topk: np.ndarray | None = None) -> float:
    pos, neg = class_masses(logits, spec, topk)
    value = pos - neg if spec.kind == "l1" else pos
    return value * spec.scale


def bias_L1(logits, spec: BiasMetricSpec) -> float:
    if spec.kind != "l1":
        raise ValueError("bias_L1 needs an l1 spec")
    return metric_value(logits, spec)


def bias_L2(logits, spec: BiasMetricSpec) -> float:
    if spec.kind != "l2":
        raise ValueError("bias_L2 needs an l2 spec")
    return metric_value(logits, spec)


def metric_gradient(logits, spec, topk: np.ndarray | None = None) -> np.ndarray:
    """dL/dlogits with the top-k set frozen; non-zero only at the last position."""
    logits = np.asarray(logits, dtype=np.float64)
    last = _last(logits)
    topk = topk_ids(last, spec.k) if topk is None else topk
    c = class_weights(spec, topk, last.shape[-1])
    p = softmax(last)
    g_last = p * (c - c @ p)
    grad = np.zeros_like(logits)
    if logits.ndim == 2:
        grad[-1] = g_last
    else:
        grad[:] = g_last
    return grad


class PairMetric:
    """Metric bound to one clean run, applying the spec's top-k policy."""

    def __init__(self, spec, clean_logits):
        self.spec = spec
        self.topk = topk_ids(clean_logits, spec.k) if spec.freeze_topk else None

    def __call__(self, logits) -> float:
        return metric_value(logits, self.spec, self.topk)

    def gradient(self, logits) -> np.ndarray:
        topk = self.topk if self.topk is not None else topk_ids(logits, self.spec.k)
        return metric_gradient(logits, self.spec, topk)


def mean_bias(weights: Weights, sentences: Sequence[Sequence[int]], spec) -> float:
    """Average metric over sentences, each scored on its own top-k."""
    if not sentences:
        raise ValueError("mean_bias needs at least one sentence")
    return float(np.mean([metric_value(forward(weights, s)[0], spec) for s in sentences]))


def categorize_dataset(weights: Weights, sentences: Sequence[Sequence[int]], spec):
    """Split sentences into (positive/male, negative/female) by top-k class mass.

    A sentence is positive when its positive mass is greater than or equal
    to its negative mass.
    """
    positive, negative = [], []
    for s in sentences:
        pos, neg = class_masses(forward(weights, s)[0], spec)
        (positive if pos >= neg else negative).append(s)
    return positive, negative


# --- sentence classification ----------------------------------------------------


class ClassifierError(RuntimeError):
    pass


@dataclass
class LexiconClassifier:
    """Labels a text by its last word: positive, negative, or neutral."""

    positive_words: frozenset[str]
    negative_words: frozenset[str]

    @classmethod
    def default(cls, mode: str = "sentiment") -> "LexiconClassifier":
        pos, neg = (frozenset(_read_words(data_path(f))) for f in LEXICON_FILES[mode])
        return cls(pos, neg)

    def classify(self, texts: Sequence[str]) -> list[dict]:
        out = []
        for text in texts:
            words = split_words(text)
            last = words[-1] if words else ""
            if last in self.positive_words:
                out.append({"label": "positive", "score": 1.0})
            elif last in self.negative_words:
                out.append({"label": "negative", "score": 1.0})
            else:
                out.append({"label": "neutral", "score": 0.0})
        return out


@dataclass
class ExternalClassifier:
    """HTTP sentiment classifier with an append-only on-disk cache.

    POSTs ``{"texts": [...]}`` and expects ``{"labels": [{"label", "score"}, ...]}``.
    Cached results are keyed by the SHA-256 of the text. Each batch is
    written to the cache as soon as it succeeds, so a network failure leaves
    earlier batches cached.
    """

    endpoint: str
    cache_path: str | None = None
    batch_size: int = 32
    timeout: float = 30.0
    requests_made: int = field(default=0, init=False)
    _cache: dict | None = field(default=None, init=False, repr=False)

    @staticmethod
    def key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _load_cache(self) -> dict:
        if self._cache is None:
            self._cache = {}
            if self.cache_path and os.path.exists(self.cache_path):
                with open(self.cache_path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            rec = json.loads(line)
                            self._cache[rec["key"]] = {"label": rec["label"], "score": rec["score"]}
        return self._cache

    def _post(self, texts: list[str]) -> list[dict]:
        body = json.dumps({"texts": texts}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        self.requests_made += 1
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError) as exc:
            raise ClassifierError(f"classifier request to {self.endpoint} failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ClassifierError(f"classifier returned invalid JSON: {exc}") from exc
        labels = payload.get("labels") if isinstance(payload, dict) else None
        if not isinstance(labels, list) or len(labels) != len(texts):
            raise ClassifierError("classifier response must carry one label per text under 'labels'")
        out = []
        for item in labels:
            if not isinstance(item, dict) or item.get("label") not in ("positive", "negative"):
                raise ClassifierError(f"malformed classifier label: {item!r}")
            out.append({"label": item["label"], "score": float(item.get("score", 0.0))})
        return out

    def classify(self, texts: Sequence[str]) -> list[dict]:
        cache = self._load_cache()
        todo = list(dict.fromkeys(t for t in texts if self.key(t) not in cache))
        for start in range(0, len(todo), self.batch_size):
            batch = todo[start:start + self.batch_size]
            results = self._post(batch)
            records = []
            for text, res in zip(batch, results):
                cache[self.key(text)] = res
                records.append(json.dumps({"key": self.key(text), **res}))
            if self.cache_path:
                os.makedirs(os.path.dirname(os.path.abspath(self.cache_path)), exist_ok=True)
                with open(self.cache_path, "a", encoding="utf-8") as fh:
                    fh.write("\n".join(records) + "\n")
        return [dict(cache[self.key(t)]) for t in texts]


def classify_external(texts: Sequence[str], endpoint: str | None = None, cache_path: str | None = None,
                      fallback: LexiconClassifier | None = None) -> list[dict]:
    """Classify texts via ``EAP_CLASSIFIER_URL`` when set, else the lexicon classifier."""
    endpoint = endpoint or os.environ.get("EAP_CLASSIFIER_URL")
    if not endpoint:
        return (fallback or LexiconClassifier.default()).classify(texts)
    return ExternalClassifier(endpoint, cache_path).classify(texts)


def classify_tokens(prefix: str, token_ids: Iterable[int], vocabulary: Vocabulary, classifier) -> TokenClassLexicon:
    """Sentiment lexicon from classifying ``prefix + token`` for each candidate token."""
    token_ids = [int(t) for t in token_ids]
    texts = [f"{prefix} {vocabulary.tokens[t]}" for t in token_ids]
    labels = classifier.classify(texts)
    pos = {t for t, lab in zip(token_ids, labels) if lab["label"] == "positive"}
    neg = {t for t, lab in zip(token_ids, labels) if lab["label"] == "negative"}
    return TokenClassLexicon("sentiment", frozenset(pos), frozenset(neg))

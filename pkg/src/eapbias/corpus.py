"""Word-level vocabulary, bias templates, and clean/corrupted example pairs."""

from __future__ import annotations

import json
import logging
import os
import random
import re
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

UNK = "<unk>"
SLOT = "{X}"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def data_path(name: str) -> str:
    return str(resources.files("eapbias") / "data" / name)


def split_words(text: str) -> list[str]:
    """Lowercased word and single-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijection between token strings and ids; id 0 is the unknown token."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            tokens = [UNK] + [t for t in tokens if t != UNK]
        seen = set()
        for tok in tokens[1:]:
            if split_words(tok) != [tok]:
                raise ValueError(f"vocabulary token {tok!r} is not a single lowercased word or symbol")
            if tok in seen:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            seen.add(tok)
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    unk_id = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike | None = None) -> "Vocabulary":
        path = path or data_path("vocab.txt")
        with open(path, encoding="utf-8") as fh:
            return cls([line.strip() for line in fh if line.strip()])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def tokenize(text: str, vocabulary: Vocabulary) -> list[int]:
    return vocabulary.encode(text)


def detokenize(ids: Iterable[int], vocabulary: Vocabulary) -> str:
    return vocabulary.decode(ids)


# --- templates and pairs ------------------------------------------------------


@dataclass(frozen=True)
class TemplateSpec:
    id: str
    pattern: str
    c1: str
    c2: str

    def __post_init__(self):
        if self.pattern.count(SLOT) != 1:
            raise ValueError(f"template {self.id} must contain exactly one {SLOT} slot: {self.pattern!r}")

    def fill(self, entity: str) -> str:
        return self.pattern.replace(SLOT, entity)

    def replacement(self, mode: str) -> str:
        mode = mode.lower()
        if mode == "c1":
            return self.c1
        if mode == "c2":
            return self.c2
        raise ValueError(f"unknown corruption mode {mode!r} (expected c1 or c2)")


def load_templates(path: str | os.PathLike | None = None) -> dict[str, TemplateSpec]:
    with open(path or data_path("templates.json"), encoding="utf-8") as fh:
        records = json.load(fh)
    return {r["id"]: TemplateSpec(r["id"], r["pattern"], r["c1"], r["c2"]) for r in records}


@dataclass(frozen=True)
class ExamplePair:
    clean: tuple[int, ...]
    corrupt: tuple[int, ...]
    entity: str
    template: str
    mode: str
    clean_text: str = ""
    corrupt_text: str = ""

    def __post_init__(self):
        if len(self.clean) != len(self.corrupt):
            raise ValueError(f"pair for {self.entity!r}: clean and corrupt lengths differ")


def generate_pairs(template: TemplateSpec, entities: Sequence[str], mode: str,
                   vocabulary: Vocabulary) -> tuple[list[ExamplePair], list[str]]:
    """One clean/corrupt pair per entity, by symmetric token replacement.

    Returns ``(pairs, dropped)``; ``dropped`` lists entities whose clean and
    corrupted token lengths differ, which are skipped rather than padded.
    """
    if not entities:
        raise ValueError("entity list is empty")
    replacement = template.replacement(mode)
    corrupt_text = template.fill(replacement)
    corrupt = tuple(vocabulary.encode(corrupt_text))
    pairs, dropped = [], []
    for entity in entities:
        clean_text = template.fill(entity)
        clean = tuple(vocabulary.encode(clean_text))
        if len(clean) != len(corrupt):
            dropped.append(entity)
            continue
        if any(t not in vocabulary for t in split_words(entity)):
            logger.warning("entity %r is not in the vocabulary; it maps to %s", entity, UNK)
        pairs.append(ExamplePair(clean, corrupt, entity, template.id, mode.lower(),
                                 " ".join(split_words(clean_text)), " ".join(split_words(corrupt_text))))
    if dropped:
        logger.info("dropped %d length-mismatched pairs: %s", len(dropped), ", ".join(dropped))
    return pairs, dropped


def write_pairs(pairs: Iterable[ExamplePair], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            rec = asdict(pair)
            rec["clean"], rec["corrupt"] = list(pair.clean), list(pair.corrupt)
            fh.write(json.dumps(rec) + "\n")


def read_pairs(path: str | os.PathLike) -> list[ExamplePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                pairs.append(ExamplePair(
                    tuple(rec["clean"]), tuple(rec["corrupt"]), rec.get("entity", ""),
                    rec.get("template", "custom"), rec.get("mode", "c2"),
                    rec.get("clean_text", ""), rec.get("corrupt_text", ""),
                ))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad pair record ({exc})") from exc
    return pairs


def load_entities(path: str | os.PathLike) -> list[str]:
    """One entity per line, stripped and deduplicated in first-seen order."""
    with open(path, encoding="utf-8") as fh:
        lines = [line.strip() for line in fh]
    entities = list(dict.fromkeys(line for line in lines if line))
    if not entities:
        warnings.warn(f"entity file {path} is empty", stacklevel=2)
    return entities


def completion_corpus(template: TemplateSpec, entities: Sequence[str], completions: Sequence[str],
                      vocabulary: Vocabulary) -> list[list[int]]:
    """Token sequences ``template(entity) + completion`` for every combination."""
    return [vocabulary.encode(f"{template.fill(e)} {c}") for e in entities for c in completions]


# --- downstream-task corruptions ----------------------------------------------


def load_nouns(path: str | os.PathLike | None = None) -> frozenset[str]:
    with open(path or data_path("nouns.txt"), encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


_CORE_RE = re.compile(r"^(\W*)(.*?)(\W*)$")


def corrupt_downstream(sentence: str, mode: str, seed: int = 0,
                       nouns: frozenset[str] | None = None) -> str | None:
    """Length-preserving corruption of a free-text sentence.

    ``noun_xyz`` replaces every noun (by word list) with ``XYZ`` in place;
    ``word_swap`` swaps two distinct, seeded-randomly chosen words. Returns
    ``None`` when the sentence does not qualify (no noun, fewer than two words).
    """
    words = sentence.split()
    if mode == "noun_xyz":
        nouns = load_nouns() if nouns is None else nouns
        out, hit = [], False
        for word in words:
            lead, core, trail = _CORE_RE.match(word).groups()
            if core.lower() in nouns:
                out.append(f"{lead}XYZ{trail}")
                hit = True
            else:
                out.append(word)
        return " ".join(out) if hit else None
    if mode == "word_swap":
        if len(words) < 2:
            return None
        i, j = random.Random(seed).sample(range(len(words)), 2)
        words[i], words[j] = words[j], words[i]
        return " ".join(words)
    raise ValueError(f"unknown downstream corruption {mode!r} (expected noun_xyz or word_swap)")


def corrupt_sentences(sentences: Iterable[str], mode: str, seed: int = 0,
                      nouns: frozenset[str] | None = None) -> tuple[list[tuple[str, str]], list[str]]:
    """Apply :func:`corrupt_downstream` to many sentences; returns (kept pairs, filtered)."""
    if mode == "noun_xyz" and nouns is None:
        nouns = load_nouns()
    kept, filtered = [], []
    for i, sentence in enumerate(sentences):
        out = corrupt_downstream(sentence, mode, seed + i, nouns)
        if out is None:
            filtered.append(sentence)
        else:
            kept.append((sentence, out))
    return kept, filtered

"""A small, deterministic biased model for end-to-end checks and demos.

The recipe fine-tunes a random model on DSS1 completions so that a
nationality in the slot is followed by a positive word, while the neutral
replacement ("emirati") is followed by a neutral word. The neutral
sequences are replicated so the two classes carry roughly equal weight.
"""

from __future__ import annotations

from .config import ModelConfig
from .corpus import Vocabulary, completion_corpus, data_path, load_entities, load_templates
from .model import Weights, fine_tune, init_random

NEUTRAL_WORDS = ("tall", "many", "different", "busy", "religious", "traditional",
                 "young", "old", "common", "similar", "quiet", "numerous")
NEUTRAL_REPEAT = 80
TOY_SEED = 7
TOY_STEPS = 500
TOY_LR = 1e-2


def toy_config(vocab_size: int, n_layers: int = 3, n_heads: int = 3, d_head: int = 8) -> ModelConfig:
    d_model = n_heads * d_head
    return ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_head=d_head,
                       d_mlp=4 * d_model, vocab_size=vocab_size, max_seq_len=16)


def single_word_entities(path: str | None = None) -> list[str]:
    return [e for e in load_entities(path or data_path("nationalities.txt")) if " " not in e]


def bias_corpus(vocab: Vocabulary, template_id: str = "DSS1") -> list[list[int]]:
    """Positive completions for every nationality plus repeated neutral ones for the C2 entity."""
    template = load_templates()[template_id]
    with open(data_path("positive.txt"), encoding="utf-8") as fh:
        positive = [line.strip() for line in fh if line.strip()]
    biased = completion_corpus(template, single_word_entities(), positive, vocab)
    neutral = completion_corpus(template, [template.c2], NEUTRAL_WORDS, vocab)
    return biased + neutral * NEUTRAL_REPEAT


def biased_toy_model(vocab: Vocabulary | None = None, steps: int = TOY_STEPS,
                     seed: int = TOY_SEED) -> tuple[Weights, Weights]:
    """(initial weights, fine-tuned weights) for the toy recipe."""
    vocab = vocab or Vocabulary.from_file()
    before = init_random(toy_config(len(vocab)), seed)
    after = fine_tune(before, bias_corpus(vocab), steps, TOY_LR, seed)
    return before, after

import numpy as np
import pytest

from eapbias.config import ModelConfig
from eapbias.corpus import Vocabulary, generate_pairs, load_templates
from eapbias.metrics import BiasMetricSpec, TokenClassLexicon, load_lexicon
from eapbias.model import init_random
from eapbias.toy import biased_toy_model, single_word_entities

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria checks")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return _record


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_head=4, d_mlp=16, vocab_size=20, max_seq_len=8)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_random(small_config, 3)


@pytest.fixture(scope="session")
def small_spec():
    lex = TokenClassLexicon("sentiment", frozenset({1, 3, 5, 7, 9}), frozenset({2, 4, 6, 8}))
    return BiasMetricSpec("l2", lex, k=10)


@pytest.fixture(scope="session")
def small_pairs():
    return [((1, 4, 6, 2, 9), (11, 4, 6, 2, 9)), ((3, 4, 6, 2, 9), (11, 4, 6, 2, 9)),
            ((5, 7, 0, 2, 13), (12, 7, 0, 2, 13))]


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.from_file()


@pytest.fixture(scope="session")
def toy_models(vocab):
    """(before, after) weights of the biased toy recipe; trained once per session."""
    return biased_toy_model(vocab)


@pytest.fixture(scope="session")
def toy_pairs(vocab):
    pairs, _ = generate_pairs(load_templates()["DSS1"], single_word_entities(), "c2", vocab)
    return pairs


@pytest.fixture(scope="session")
def toy_spec(vocab):
    lexicon, _ = load_lexicon(vocab, "sentiment")
    return BiasMetricSpec("l2", lexicon, k=10)


@pytest.fixture
def rng():
    return np.random.default_rng(0)

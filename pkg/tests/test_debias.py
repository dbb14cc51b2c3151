import numpy as np
import pytest

from eapbias.attribution import eap_scores, evaluate_corrupt
from eapbias.corpus import load_templates
from eapbias.debias import auto_corrupt, debias_forward, default_n, delta_bias
from eapbias.graph import build_graph
from eapbias.metrics import PairMetric
from eapbias.model import forward


@pytest.fixture(scope="module")
def scored(small_weights, small_spec, small_pairs):
    return eap_scores(small_weights, small_pairs, small_spec).graph


def test_default_n():
    assert default_n(32491) == 325
    assert default_n(46) == 1


def test_boundaries_bit_exact(small_weights, small_pairs, scored):
    clean, corrupt = small_pairs[0]
    assert debias_forward(small_weights, clean, corrupt, scored, 0).tobytes() == \
        forward(small_weights, clean)[0].tobytes()
    assert debias_forward(small_weights, clean, corrupt, scored, len(scored)).tobytes() == \
        forward(small_weights, corrupt)[0].tobytes()


def test_debias_errors(small_weights, scored):
    with pytest.raises(ValueError):
        debias_forward(small_weights, (1, 2), (1,), scored, 0)
    with pytest.raises(ValueError):
        debias_forward(small_weights, (1, 2), (3, 2), scored, len(scored) + 1)


def test_candidates_restrict_bias_edges(small_weights, small_pairs, scored):
    clean, corrupt = small_pairs[0]
    names = scored.edge_names[:5]
    out = debias_forward(small_weights, clean, corrupt, scored, 5, candidates=names)
    from eapbias.model import forward_patched

    _, cache = forward(small_weights, corrupt, capture=True)
    expected = forward_patched(small_weights, clean, cache, [scored.edge(i) for i in range(5)])
    assert out.tobytes() == expected.tobytes()


def test_delta_bias(small_weights, small_spec, small_pairs, scored):
    zero = delta_bias(small_weights, small_pairs, small_spec, scored, 0)
    assert zero.delta_percent == 0.0
    full = delta_bias(small_weights, small_pairs, small_spec, scored, len(scored))
    assert full.bias_patched == pytest.approx(evaluate_corrupt(small_weights, small_pairs, small_spec), rel=1e-12)
    again = delta_bias(small_weights, small_pairs, small_spec, scored, 7)
    assert again.to_dict() == delta_bias(small_weights, small_pairs, small_spec, scored, 7).to_dict()


def test_delta_bias_undefined_when_clean_is_zero(small_weights, small_pairs):
    from eapbias.metrics import BiasMetricSpec, TokenClassLexicon

    spec = BiasMetricSpec("l2", TokenClassLexicon("sentiment", frozenset(), frozenset()), 5)
    report = delta_bias(small_weights, small_pairs, spec, build_graph(small_weights.config), 3)
    assert report.delta_percent is None


def test_report_json(small_weights, small_spec, small_pairs, scored, tmp_path):
    import json

    delta_bias(small_weights, small_pairs, small_spec, scored, 2).write_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["n_edges_patched"] == 2 and len(data["per_pair"]) == len(small_pairs)


def test_auto_corrupt(vocab):
    templates = load_templates()
    assert vocab.decode(auto_corrupt(vocab.encode("afghan people are so"), templates, vocab)) == \
        "emirati people are so"
    v = vocab
    a, b = v.id("people"), v.id("so")
    assert auto_corrupt([a, b], templates, v) == [b, a]


def test_auto_corrupt_preserves_length(vocab):
    rng = np.random.default_rng(0)
    templates = load_templates()
    for _ in range(1000):
        ids = rng.integers(0, len(vocab), size=int(rng.integers(1, 10))).tolist()
        assert len(auto_corrupt(ids, templates, vocab, seed=int(rng.integers(100)))) == len(ids)


def test_toy_debias_lowers_l2(toy_models, toy_pairs, toy_spec, vocab):
    """On the biased toy model, corrupting the top 10% of bias edges lowers L2 for "afghan people are so"."""
    _, weights = toy_models
    graph = eap_scores(weights, toy_pairs, toy_spec).graph
    clean = vocab.encode("afghan people are so")
    corrupt = auto_corrupt(clean, load_templates(), vocab)
    clean_logits, _ = forward(weights, clean)
    pm = PairMetric(toy_spec, clean_logits)
    patched = debias_forward(weights, clean, corrupt, graph, int(np.ceil(0.1 * len(graph))))
    assert pm(patched) < pm(clean_logits)

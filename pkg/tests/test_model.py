import math

import numpy as np
import pytest

from eapbias.config import ModelConfig
from eapbias.graph import Edge, Node, build_graph, node_index, port_index, upstream_count
from eapbias.model import (Weights, _run, backward, fine_tune, forward, forward_patched, init_random,
                           mean_cross_entropy)


# --- config -------------------------------------------------------------------


def test_config_rejects_inconsistent_width():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=1, n_heads=2, d_model=5, d_head=2, d_mlp=4, vocab_size=3)


@pytest.mark.parametrize("field,value", [("n_layers", 0), ("vocab_size", -1), ("max_seq_len", 1),
                                         ("ln_epsilon", 0.0)])
def test_config_rejects_bad_values(field, value):
    kw = dict(n_layers=1, n_heads=1, d_model=2, d_head=2, d_mlp=2, vocab_size=3)
    kw[field] = value
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = ModelConfig(n_layers=2, n_heads=3, d_model=6, d_head=2, d_mlp=8, vocab_size=11)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# --- init ---------------------------------------------------------------------


def test_init_is_deterministic(small_config):
    assert init_random(small_config, 42).equals(init_random(small_config, 42))


def test_init_seed_sensitivity(small_config):
    assert not init_random(small_config, 42).equals(init_random(small_config, 43))


def test_init_ranges(small_config):
    w = init_random(small_config, 0)
    for name, arr in w.params.items():
        if ".ln" in name or name.startswith("ln_final"):
            assert np.all(arr == (1.0 if name.endswith(".w") else 0.0))
            continue
        fan_in = small_config.d_mlp if name.endswith(("W_out", "b_out")) else small_config.d_model
        assert np.abs(arr).max() <= 1 / math.sqrt(fan_in)


def test_tensor_streams_are_independent_of_other_tensors():
    a = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_head=4, d_mlp=8, vocab_size=5)
    b = ModelConfig(n_layers=2, n_heads=1, d_model=4, d_head=4, d_mlp=8, vocab_size=5)
    wa, wb = init_random(a, 9), init_random(b, 9)
    assert wa["blocks.0.attn.W_Q"].tobytes() == wb["blocks.0.attn.W_Q"].tobytes()


def test_weights_are_read_only(small_weights):
    with pytest.raises(ValueError):
        small_weights["embed.W_E"][0, 0] = 1.0


def test_weights_shape_validation(small_weights):
    with pytest.raises(ValueError):
        small_weights.replace(**{"embed.W_E": np.zeros((2, 2))})


# --- forward ------------------------------------------------------------------


def _ln_ref(x, w, b, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * wi + bi for v, wi, bi in zip(x, w, b)]


def _matvec(x, M):
    return [sum(x[i] * M[i][j] for i in range(len(x))) for j in range(len(M[0]))]


def _gelu_ref(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def reference_forward(P, tokens, eps):
    """Scalar-loop forward of a 1-layer, 1-head model, written independently of the package."""
    T = len(tokens)
    x = [[P["embed.W_E"][t][i] + P["embed.W_pos"][pos][i] for i in range(2)] for pos, t in enumerate(tokens)]
    n1 = [_ln_ref(r, P["blocks.0.ln1.w"], P["blocks.0.ln1.b"], eps) for r in x]
    q = [_matvec(r, P["blocks.0.attn.W_Q"][0]) for r in n1]
    k = [_matvec(r, P["blocks.0.attn.W_K"][0]) for r in n1]
    v = [_matvec(r, P["blocks.0.attn.W_V"][0]) for r in n1]
    attn_out = []
    for i in range(T):
        s = [sum(q[i][a] * k[j][a] for a in range(2)) / math.sqrt(2) for j in range(i + 1)]
        m = max(s)
        e = [math.exp(val - m) for val in s]
        z = [sum(e[j] / sum(e) * v[j][a] for j in range(i + 1)) for a in range(2)]
        attn_out.append(_matvec(z, P["blocks.0.attn.W_O"][0]))
    x = [[x[i][a] + attn_out[i][a] for a in range(2)] for i in range(T)]
    out = []
    for r in x:
        h = _ln_ref(r, P["blocks.0.ln2.w"], P["blocks.0.ln2.b"], eps)
        hid = [a + b for a, b in zip(_matvec(h, P["blocks.0.mlp.W_in"]), P["blocks.0.mlp.b_in"])]
        act = [_gelu_ref(a) for a in hid]
        mo = [a + b for a, b in zip(_matvec(act, P["blocks.0.mlp.W_out"]), P["blocks.0.mlp.b_out"])]
        r = [a + b for a, b in zip(r, mo)]
        out.append(_matvec(_ln_ref(r, P["ln_final.w"], P["ln_final.b"], eps), P["unembed.W_U"]))
    return out


def hand_model():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=2, d_head=2, d_mlp=2, vocab_size=3, max_seq_len=3)
    P = {
        "embed.W_E": [[0.5, -0.25], [1.0, 0.75], [-0.5, 0.3]],
        "embed.W_pos": [[0.1, 0.0], [0.0, -0.2], [0.05, 0.05]],
        "blocks.0.ln1.w": [1.5, 0.5], "blocks.0.ln1.b": [0.1, -0.1],
        "blocks.0.attn.W_Q": [[[0.3, -0.2], [0.4, 0.1]]],
        "blocks.0.attn.W_K": [[[-0.6, 0.2], [0.5, 0.7]]],
        "blocks.0.attn.W_V": [[[0.9, 0.1], [-0.3, 0.8]]],
        "blocks.0.attn.W_O": [[[0.2, -0.4], [0.6, 0.3]]],
        "blocks.0.ln2.w": [0.8, 1.2], "blocks.0.ln2.b": [0.0, 0.2],
        "blocks.0.mlp.W_in": [[0.7, -0.5], [0.25, 0.9]], "blocks.0.mlp.b_in": [0.1, -0.3],
        "blocks.0.mlp.W_out": [[-0.4, 0.6], [0.35, 0.15]], "blocks.0.mlp.b_out": [0.05, -0.05],
        "ln_final.w": [1.1, 0.9], "ln_final.b": [-0.2, 0.3],
        "unembed.W_U": [[1.0, -0.5, 0.25], [0.3, 0.8, -1.2]],
    }
    return cfg, P, Weights(cfg, {k: np.array(v) for k, v in P.items()})


def test_forward_matches_hand_computation():
    cfg, P, w = hand_model()
    tokens = [2, 0, 1]
    logits, _ = forward(w, tokens)
    expected = np.array(reference_forward(P, tokens, cfg.ln_epsilon))
    np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-12)


def test_zero_unembed_gives_uniform(small_weights):
    w = small_weights.replace(**{"unembed.W_U": np.zeros_like(small_weights["unembed.W_U"])})
    logits, _ = forward(w, [1, 2, 3])
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(p, 1 / w.config.vocab_size, rtol=0, atol=1e-15)


def test_forward_is_pure(small_weights):
    a, _ = forward(small_weights, [1, 2, 3, 4])
    b, _ = forward(small_weights, [1, 2, 3, 4])
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("tokens", [[], [0, 99], list(range(9)), [-1]])
def test_forward_rejects_bad_tokens(small_weights, tokens):
    with pytest.raises(ValueError):
        forward(small_weights, tokens)


def test_residual_decomposition(small_weights):
    cfg = small_weights.config
    _, cache = forward(small_weights, [3, 1, 4, 1, 5], capture=True)
    g = build_graph(cfg)
    for node in g.nodes:
        n_up = upstream_count(node, cfg)
        if n_up == 0:
            continue
        total = cache.contributions[:n_up].sum(axis=0)
        ports = ["q", "k", "v"] if node.kind == "head" else [None]
        for port in ports:
            actual = cache.port_inputs[port_index(node, port, cfg)]
            rel = np.abs(total - actual).max() / np.abs(actual).max()
            assert rel <= 1e-9


def test_disabled_layernorm_runs():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=4, d_head=2, d_mlp=4, vocab_size=6, layernorm_enabled=False)
    w = init_random(cfg, 1)
    assert "blocks.0.ln1.w" not in w.params
    logits, _ = forward(w, [1, 2])
    assert np.isfinite(logits).all()


# --- backward -----------------------------------------------------------------


def _linear_functional(weights, tokens, seed=0):
    G = np.random.default_rng(seed).normal(size=(len(tokens), weights.config.vocab_size))
    return G, lambda logits: float((G * logits).sum())


def test_backward_zero_grad(small_weights):
    tokens = [1, 2, 3]
    logits, cache = forward(small_weights, tokens, capture=True)
    g = backward(small_weights, tokens, np.zeros_like(logits), cache)
    assert not g.ports.any()
    assert not any(v.any() for v in g.params.values())


def test_backward_scales_linearly(small_weights):
    tokens = [1, 2, 3]
    logits, cache = forward(small_weights, tokens, capture=True)
    G, _ = _linear_functional(small_weights, tokens)
    g1 = backward(small_weights, tokens, G, cache)
    g4 = backward(small_weights, tokens, 4.0 * G, cache)
    assert np.array_equal(g4.ports, 4.0 * g1.ports)


def test_backward_needs_matching_cache(small_weights):
    logits, cache = forward(small_weights, [1, 2, 3], capture=True)
    with pytest.raises(ValueError):
        backward(small_weights, [1, 2, 4], np.zeros_like(logits), cache)
    with pytest.raises(ValueError):
        backward(small_weights, [1, 2, 3], np.zeros_like(logits), None)


def test_port_gradients_match_finite_differences(small_weights):
    tokens = [4, 7, 1, 3]
    G, f = _linear_functional(small_weights, tokens, 1)
    logits, cache = forward(small_weights, tokens, capture=True)
    grads = backward(small_weights, tokens, G, cache)
    rng = np.random.default_rng(2)
    eps = 1e-3
    n_ports, T, d = grads.ports.shape
    for _ in range(20):
        p, t, i = int(rng.integers(n_ports)), int(rng.integers(T)), int(rng.integers(d))
        delta = np.zeros((T, d))
        delta[t, i] = eps
        up = f(_run(small_weights, tokens, port_delta={p: delta})[0])
        down = f(_run(small_weights, tokens, port_delta={p: -delta})[0])
        fd = (up - down) / (2 * eps)
        assert abs(fd - grads.ports[p, t, i]) <= 1e-4 * max(abs(fd), 1e-8)


def test_param_gradients_match_finite_differences(small_weights):
    tokens = [4, 7, 1, 3]
    G, f = _linear_functional(small_weights, tokens, 3)
    _, cache = forward(small_weights, tokens, capture=True)
    grads = backward(small_weights, tokens, G, cache)
    eps = 1e-3
    for name in sorted(small_weights.params):
        arr = small_weights[name]
        idx = tuple(int(s) // 2 for s in arr.shape)
        if name == "embed.W_pos":
            idx = (1,) + idx[1:]
        vals = []
        for sign in (1, -1):
            pert = arr.copy()
            pert[idx] += sign * eps
            vals.append(f(forward(small_weights.replace(**{name: pert}), tokens)[0]))
        fd = (vals[0] - vals[1]) / (2 * eps)
        assert abs(fd - grads.params[name][idx]) <= 1e-4 * max(abs(fd), 1e-8), name


# --- patched forward ----------------------------------------------------------


def test_patch_nothing_is_clean(small_weights):
    clean, corrupt = [1, 2, 3, 4], [5, 2, 3, 4]
    _, corr_cache = forward(small_weights, corrupt, capture=True)
    out = forward_patched(small_weights, clean, corr_cache, [])
    assert out.tobytes() == forward(small_weights, clean)[0].tobytes()


def test_patch_everything_is_corrupt(small_weights):
    clean, corrupt = [1, 2, 3, 4], [5, 2, 3, 4]
    _, corr_cache = forward(small_weights, corrupt, capture=True)
    out = forward_patched(small_weights, clean, corr_cache, build_graph(small_weights.config).edges)
    assert out.tobytes() == forward(small_weights, corrupt)[0].tobytes()


def test_patch_length_mismatch(small_weights):
    _, corr_cache = forward(small_weights, [1, 2, 3], capture=True)
    with pytest.raises(ValueError):
        forward_patched(small_weights, [1, 2], corr_cache, [])


def test_single_edge_patch_is_path_local(small_weights):
    """Patching input->m1 only changes m1's input, so only m1's contribution and the logits move.

    Overwriting the corrupted cache entry for the source with its clean value
    (zero source-destination difference) recovers the clean logits exactly.
    """
    cfg = small_weights.config
    clean, corrupt = [1, 2, 3, 4], [5, 6, 3, 4]
    clean_logits, clean_cache = forward(small_weights, clean, capture=True)
    _, corr_cache = forward(small_weights, corrupt, capture=True)
    edge = Edge(Node("input"), Node("mlp", 1))
    out, patched_cache = _run(small_weights, clean, plan={port_index(edge.dst, None, cfg): _mask(cfg, edge)},
                              corrupt=corr_cache.contributions, capture=True)
    assert not np.allclose(out, clean_logits)
    m1 = node_index(Node("mlp", 1), cfg)
    diff = np.abs(patched_cache.contributions - clean_cache.contributions).max(axis=(1, 2))
    assert diff[m1] > 0
    assert np.all(diff[np.arange(len(diff)) != m1] == 0)

    zeroed = corr_cache.contributions.copy()
    zeroed[node_index(edge.src, cfg)] = clean_cache.contributions[node_index(edge.src, cfg)]
    restored, _ = _run(small_weights, clean, plan={port_index(edge.dst, None, cfg): _mask(cfg, edge)},
                       corrupt=zeroed)
    assert restored.tobytes() == clean_logits.tobytes()


def _mask(cfg, edge):
    m = np.zeros(upstream_count(edge.dst, cfg), dtype=bool)
    m[node_index(edge.src, cfg)] = True
    return m


def test_patched_logits_ignore_edge_order(small_weights):
    clean, corrupt = [1, 2, 3, 4], [5, 2, 3, 4]
    _, corr_cache = forward(small_weights, corrupt, capture=True)
    edges = build_graph(small_weights.config).edges[::5]
    a = forward_patched(small_weights, clean, corr_cache, edges)
    b = forward_patched(small_weights, clean, corr_cache, list(reversed(edges)))
    assert a.tobytes() == b.tobytes()


# --- fine-tuning --------------------------------------------------------------


def _toy_corpus():
    rng = np.random.default_rng(0)
    return [[int(a), int(b), 9, 10 + int(a) % 3] for a, b in rng.integers(1, 8, size=(32, 2))]


def test_fine_tune_null_updates(small_weights):
    corpus = _toy_corpus()
    assert fine_tune(small_weights, corpus, 5, 0.0, 1).equals(small_weights)
    assert fine_tune(small_weights, corpus, 0, 1e-2, 1).equals(small_weights)


def test_fine_tune_reduces_loss_and_is_deterministic(small_weights):
    corpus = _toy_corpus()
    before = mean_cross_entropy(small_weights, corpus)
    tuned = fine_tune(small_weights, corpus, 200, 1e-2, 1)
    assert mean_cross_entropy(tuned, corpus) < before
    assert fine_tune(small_weights, corpus, 200, 1e-2, 1).equals(tuned)


def test_fine_tune_rejects_bad_input(small_weights):
    with pytest.raises(ValueError):
        fine_tune(small_weights, [], 1, 1e-2, 0)
    with pytest.raises(ValueError):
        fine_tune(small_weights, _toy_corpus(), -1, 1e-2, 0)

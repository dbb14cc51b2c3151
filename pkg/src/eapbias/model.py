"""Desk-scale pre-layernorm GPT-2 style transformer in float64 numpy.

The model is written around the residual-stream decomposition used for edge
attribution: every node (input embedding, each attention head, each MLP)
writes an additive contribution, and every destination port (head q/k/v,
MLP input, logits input) reads the plain sum of its upstream contributions
*before* its own layernorm. That sum is what gets patched edge by edge, and
what gradients are taken with respect to.

Attention has no output bias, so per-head outputs (``z_h @ W_O[h]``) sum to the
attention block output exactly. The MLP output bias belongs to the MLP node,
and positional embeddings belong to the input node.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import ModelConfig
from .graph import CircuitGraph, Edge, n_ports, node_index, port_index, upstream_count

_GELU_C = math.sqrt(2.0 / math.pi)


# --- parameters ---------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, dh, m = config.d_model, config.n_heads, config.d_head, config.d_mlp
    shapes = {
        "embed.W_E": (config.vocab_size, d),
        "embed.W_pos": (config.max_seq_len, d),
    }
    for layer in range(config.n_layers):
        p = f"blocks.{layer}"
        if config.layernorm_enabled:
            shapes[f"{p}.ln1.w"] = (d,)
            shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.W_Q"] = (H, d, dh)
        shapes[f"{p}.attn.W_K"] = (H, d, dh)
        shapes[f"{p}.attn.W_V"] = (H, d, dh)
        shapes[f"{p}.attn.W_O"] = (H, dh, d)
        if config.layernorm_enabled:
            shapes[f"{p}.ln2.w"] = (d,)
            shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.W_in"] = (d, m)
        shapes[f"{p}.mlp.b_in"] = (m,)
        shapes[f"{p}.mlp.W_out"] = (m, d)
        shapes[f"{p}.mlp.b_out"] = (d,)
    if config.layernorm_enabled:
        shapes["ln_final.w"] = (d,)
        shapes["ln_final.b"] = (d,)
    shapes["unembed.W_U"] = (d, config.vocab_size)
    return shapes


def _fan_in(name: str, config: ModelConfig) -> int:
    if name.endswith("W_out") or name.endswith("b_out"):
        return config.d_mlp
    return config.d_model


@dataclass(frozen=True)
class Weights:
    config: ModelConfig
    params: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        missing = set(expected) - set(self.params)
        extra = set(self.params) - set(expected)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def replace(self, **updates: np.ndarray) -> "Weights":
        params = dict(self.params)
        params.update(updates)
        return Weights(self.config, params)

    def equals(self, other: "Weights") -> bool:
        """Bit-exact equality of config and every tensor."""
        return self.config == other.config and all(
            self.params[k].tobytes() == other.params[k].tobytes() for k in self.params
        )


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    ss = np.random.SeedSequence(entropy=seed & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def init_random(config: ModelConfig, seed: int) -> Weights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, one PCG64 stream per tensor name.

    Layernorm scales start at 1 and shifts at 0.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        if ".ln" in name or name.startswith("ln_final"):
            params[name] = np.ones(shape) if name.endswith(".w") else np.zeros(shape)
            continue
        bound = 1.0 / math.sqrt(_fan_in(name, config))
        params[name] = _tensor_rng(seed, name).uniform(-bound, bound, size=shape)
    return Weights(config, params)


# --- primitives ---------------------------------------------------------------


def _layernorm(x, w, b, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * w + b, (xhat, inv)


def _layernorm_backward(dy, w, saved):
    xhat, inv = saved
    dxhat = dy * w
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).sum(0), dy.sum(0)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# --- caches -------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Residual contributions of every output-producing node for one run.

    ``contributions[j]`` is node ``j``'s (seq_len, d_model) write to the
    residual stream, in node order (input, a0.h0, ..., m0, a1.h0, ...).
    ``port_inputs[p]`` is the pre-layernorm residual sum entering flat port
    ``p``. ``port_grads`` is filled by :func:`backward`.
    """

    tokens: tuple[int, ...]
    contributions: np.ndarray
    port_inputs: np.ndarray
    port_grads: np.ndarray | None = None
    _tape: dict = field(default_factory=dict, repr=False)


@dataclass
class Gradients:
    ports: np.ndarray  # (n_ports, seq_len, d_model)
    params: dict[str, np.ndarray]


PatchPlan = dict  # flat port index -> bool mask over that port's upstream nodes


def make_patch_plan(config: ModelConfig, edges: Iterable[Edge]) -> PatchPlan:
    plan: PatchPlan = {}
    for edge in edges:
        dst_p = port_index(edge.dst, edge.port, config)
        n_up = upstream_count(edge.dst, config)
        src = node_index(edge.src, config)
        if src >= n_up:
            raise ValueError(f"{edge.name} is not a legal edge")
        plan.setdefault(dst_p, np.zeros(n_up, dtype=bool))[src] = True
    return plan


def graph_patch_plan(graph: CircuitGraph, mask: np.ndarray) -> PatchPlan:
    """Patch plan for the edges of ``graph`` selected by boolean ``mask``."""
    plan: PatchPlan = {}
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return plan
    ports = graph.port_indices[idx]
    srcs = graph.src[idx]
    dst_nodes = graph.dst[idx]
    for p in np.unique(ports):
        sel = ports == p
        n_up = upstream_count(graph.nodes[dst_nodes[sel][0]], graph.config)
        m = np.zeros(n_up, dtype=bool)
        m[srcs[sel]] = True
        plan[int(p)] = m
    return plan


# --- forward ------------------------------------------------------------------


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) < 1:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if len(tokens) > config.max_seq_len:
        raise ValueError(f"sequence length {len(tokens)} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return tokens


def _run(weights: Weights, tokens, *, plan: PatchPlan | None = None, corrupt: np.ndarray | None = None,
         port_delta: Mapping[int, np.ndarray] | None = None, capture: bool = False):
    cfg = weights.config
    W = weights.params
    tokens = _check_tokens(cfg, tokens)
    T, H, L = len(tokens), cfg.n_heads, cfg.n_layers
    eps = cfg.ln_epsilon
    plan = plan or {}
    scale = 1.0 / math.sqrt(cfg.d_head)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    contribs = [W["embed.W_E"][tokens] + W["embed.W_pos"][:T]]
    acc = contribs[0]
    port_inputs = [None] * n_ports(cfg)
    tape: dict = {}

    def port_input(p, base):
        mask = plan.get(p)
        if mask is not None and mask.any():
            x = corrupt[0] if mask[0] else contribs[0]
            for j in range(1, len(mask)):
                x = x + (corrupt[j] if mask[j] else contribs[j])
        else:
            x = base
        if port_delta is not None and p in port_delta:
            x = x + port_delta[p]
        port_inputs[p] = x
        return x

    def ln(x, prefix):
        if not cfg.layernorm_enabled:
            return x, None
        return _layernorm(x, W[f"{prefix}.w"], W[f"{prefix}.b"], eps)

    stride = 3 * H + 1
    for layer in range(L):
        pre = f"blocks.{layer}"
        base = acc
        ln_memo: dict[int, tuple] = {}
        head_outs = []
        for h in range(H):
            normed = []
            for which in range(3):
                p = layer * stride + 3 * h + which
                x = port_input(p, base)
                if id(x) not in ln_memo:
                    ln_memo[id(x)] = ln(x, f"{pre}.ln1")
                y, saved = ln_memo[id(x)]
                normed.append(y)
                tape[("ln", p)] = saved
            lq, lk, lv = normed
            q = lq @ W[f"{pre}.attn.W_Q"][h]
            k = lk @ W[f"{pre}.attn.W_K"][h]
            v = lv @ W[f"{pre}.attn.W_V"][h]
            scores = np.where(causal, -np.inf, (q @ k.T) * scale)
            A = _softmax(scores)
            z = A @ v
            head_outs.append(z @ W[f"{pre}.attn.W_O"][h])
            tape[("head", layer, h)] = (lq, lk, lv, q, k, v, A, z)
        for out in head_outs:
            contribs.append(out)
            acc = acc + out

        p = layer * stride + 3 * H
        x = port_input(p, acc)
        y, saved = ln(x, f"{pre}.ln2")
        hidden = y @ W[f"{pre}.mlp.W_in"] + W[f"{pre}.mlp.b_in"]
        act = gelu(hidden)
        out = act @ W[f"{pre}.mlp.W_out"] + W[f"{pre}.mlp.b_out"]
        tape[("ln", p)] = saved
        tape[("mlp", layer)] = (y, hidden, act)
        contribs.append(out)
        acc = acc + out

    p = L * stride
    x = port_input(p, acc)
    y, saved = ln(x, "ln_final")
    logits = y @ W["unembed.W_U"]
    tape[("ln", p)] = saved
    tape["final"] = y

    if not capture:
        return logits, None
    cache = ActivationCache(
        tokens=tuple(int(t) for t in tokens),
        contributions=np.stack(contribs),
        port_inputs=np.stack(port_inputs),
        _tape=tape,
    )
    return logits, cache


def forward(weights: Weights, tokens: Sequence[int], capture: bool = False):
    """Next-token logits at every position, plus an :class:`ActivationCache` if ``capture``."""
    return _run(weights, tokens, capture=capture)


def forward_patched(weights: Weights, tokens_clean: Sequence[int], cache_corr: ActivationCache,
                    patched_edges, capture: bool = False):
    """Run on ``tokens_clean`` with every patched edge carrying its corrupted source value.

    Each destination port reads the sum of its upstream contributions from
    this run, except that a patched edge ``u -> port`` substitutes ``u``'s
    contribution from ``cache_corr``. Everything downstream is recomputed.

    ``patched_edges`` is an iterable of :class:`Edge` or a ready patch plan.
    Returns logits (and the cache of the patched run when ``capture``).
    """
    if len(tokens_clean) != len(cache_corr.tokens):
        raise ValueError(
            f"clean length {len(tokens_clean)} != corrupted length {len(cache_corr.tokens)}"
        )
    plan = patched_edges if isinstance(patched_edges, dict) else make_patch_plan(weights.config, patched_edges)
    logits, cache = _run(weights, tokens_clean, plan=plan, corrupt=cache_corr.contributions, capture=capture)
    return (logits, cache) if capture else logits


# --- backward -----------------------------------------------------------------


def backward(weights: Weights, tokens: Sequence[int], metric_grad_at_logits: np.ndarray,
             cache: ActivationCache | None) -> Gradients:
    """Reverse pass from dL/dlogits to every port's pre-layernorm input and every parameter."""
    if cache is None or not cache._tape:
        raise ValueError("backward needs the cache of a captured forward pass")
    if tuple(int(t) for t in tokens) != cache.tokens:
        raise ValueError("tokens do not match the cached forward pass")
    cfg = weights.config
    W = weights.params
    tape = cache._tape
    T, H, L = len(cache.tokens), cfg.n_heads, cfg.n_layers
    dlogits = np.asarray(metric_grad_at_logits, dtype=np.float64)
    if dlogits.shape != (T, cfg.vocab_size):
        raise ValueError(f"metric gradient must have shape {(T, cfg.vocab_size)}")
    scale = 1.0 / math.sqrt(cfg.d_head)
    stride = 3 * H + 1
    grads = {name: np.zeros_like(arr) for name, arr in W.items()}
    ports = np.zeros((n_ports(cfg), T, cfg.d_model))

    def ln_back(dy, p, prefix):
        if not cfg.layernorm_enabled:
            return dy
        dx, dw, db = _layernorm_backward(dy, W[f"{prefix}.w"], tape[("ln", p)])
        grads[f"{prefix}.w"] += dw
        grads[f"{prefix}.b"] += db
        return dx

    p = L * stride
    grads["unembed.W_U"] += tape["final"].T @ dlogits
    ports[p] = ln_back(dlogits @ W["unembed.W_U"].T, p, "ln_final")
    downstream = ports[p].copy()

    for layer in reversed(range(L)):
        pre = f"blocks.{layer}"
        y, hidden, act = tape[("mlp", layer)]
        g = downstream
        grads[f"{pre}.mlp.W_out"] += act.T @ g
        grads[f"{pre}.mlp.b_out"] += g.sum(0)
        d_hidden = (g @ W[f"{pre}.mlp.W_out"].T) * _gelu_grad(hidden)
        grads[f"{pre}.mlp.W_in"] += y.T @ d_hidden
        grads[f"{pre}.mlp.b_in"] += d_hidden.sum(0)
        p = layer * stride + 3 * H
        ports[p] = ln_back(d_hidden @ W[f"{pre}.mlp.W_in"].T, p, f"{pre}.ln2")
        downstream = downstream + ports[p]

        g = downstream
        for h in range(H):
            lq, lk, lv, q, k, v, A, z = tape[("head", layer, h)]
            grads[f"{pre}.attn.W_O"][h] += z.T @ g
            dz = g @ W[f"{pre}.attn.W_O"][h].T
            dA = dz @ v.T
            dv = A.T @ dz
            dS = A * (dA - (dA * A).sum(-1, keepdims=True))
            dq = (dS @ k) * scale
            dk = (dS.T @ q) * scale
            for which, (name, lx, d) in enumerate((("W_Q", lq, dq), ("W_K", lk, dk), ("W_V", lv, dv))):
                grads[f"{pre}.attn.{name}"][h] += lx.T @ d
                p = layer * stride + 3 * h + which
                ports[p] = ln_back(d @ W[f"{pre}.attn.{name}"][h].T, p, f"{pre}.ln1")
        first = layer * stride
        downstream = downstream + ports[first:first + 3 * H].sum(0)

    np.add.at(grads["embed.W_E"], np.asarray(cache.tokens), downstream)
    grads["embed.W_pos"][:T] += downstream
    cache.port_grads = ports
    return Gradients(ports=ports, params=grads)


# --- training -----------------------------------------------------------------


def sequence_loss_grad(weights: Weights, tokens: Sequence[int]) -> tuple[float, Gradients]:
    """Mean next-token cross-entropy of one sequence and its gradients."""
    logits, cache = forward(weights, tokens, capture=True)
    T = len(tokens)
    targets = np.asarray(tokens[1:])
    logp = log_softmax(logits[:-1])
    loss = -logp[np.arange(T - 1), targets].mean()
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = np.exp(logp)
    dlogits[np.arange(T - 1), targets] -= 1.0
    dlogits /= T - 1
    return float(loss), backward(weights, tokens, dlogits, cache)


def mean_cross_entropy(weights: Weights, corpus: Sequence[Sequence[int]]) -> float:
    losses = []
    for seq in corpus:
        if len(seq) < 2:
            continue
        logits, _ = forward(weights, seq)
        logp = log_softmax(logits[:-1])
        losses.append(-logp[np.arange(len(seq) - 1), np.asarray(seq[1:])].mean())
    if not losses:
        raise ValueError("corpus has no sequence with at least two tokens")
    return float(np.mean(losses))


def fine_tune(weights: Weights, corpus: Sequence[Sequence[int]], steps: int, learning_rate: float,
              seed: int, batch_size: int = 8) -> Weights:
    """Adam on mean next-token cross-entropy over seeded minibatches.

    Returns new weights; the input weights are not touched.
    """
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise ValueError("fine_tune needs a non-empty corpus of sequences with >= 2 tokens")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in weights.params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    batch_size = min(batch_size, len(corpus))
    for step in range(1, steps + 1):
        current = Weights(weights.config, params)
        batch = rng.choice(len(corpus), size=batch_size, replace=False)
        total = {k: np.zeros_like(v) for k, v in params.items()}
        for i in batch:
            _, g = sequence_loss_grad(current, corpus[i])
            for k in total:
                total[k] += g.params[k]
        for k in params:
            g = total[k] / batch_size
            m[k] = b1 * m[k] + (1 - b1) * g
            s[k] = b2 * s[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1 ** step)
            shat = s[k] / (1 - b2 ** step)
            params[k] = params[k] - learning_rate * mhat / (np.sqrt(shat) + eps)
    return Weights(weights.config, params)

"""Computational graph of a hooked transformer: nodes, edges, circuits.

Nodes are laid out in computation order::

    input, a0.h0 .. a0.h{H-1}, m0, a1.h0 .. m1, ..., m{L-1}, logits

Every node except ``logits`` writes into the residual stream, and every node
except ``input`` reads from it through one or more ports (q/k/v for heads, a
single port for MLPs and logits). An edge connects an output-producing node
to a port of a later node. The upstream set of any port is a prefix of the
node order, which the model exploits to keep residual sums exact.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig

PORTS = (None, "q", "k", "v")
_PORT_CODE = {None: 0, "q": 1, "k": 2, "v": 3}

NODE_COLORS = {"input": "green", "head": "orange", "mlp": "purple", "logits": "yellow"}


@dataclass(frozen=True, order=True)
class Node:
    kind: str
    layer: int | None = None
    head: int | None = None

    @property
    def name(self) -> str:
        if self.kind == "input":
            return "input"
        if self.kind == "logits":
            return "logits"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return f"a{self.layer}.h{self.head}"


@dataclass(frozen=True)
class Edge:
    src: Node
    dst: Node
    port: str | None = None

    @property
    def name(self) -> str:
        return format_edge(self)


def format_edge(edge: Edge) -> str:
    suffix = f"<{edge.port}>" if edge.port else ""
    return f"{edge.src.name}->{edge.dst.name}{suffix}"


_NODE_RE = re.compile(r"^(?:(input)|(logits)|m(\d+)|a(\d+)\.h(\d+))$")
_EDGE_RE = re.compile(r"^(?P<src>[^<>-]+)->(?P<dst>[^<>-]+?)(?:<(?P<port>[qkv])>)?$")


def parse_node(name: str) -> Node:
    match = _NODE_RE.match(name)
    if not match:
        raise ValueError(f"not a node name: {name!r}")
    inp, logits, mlp, layer, head = match.groups()
    if inp:
        return Node("input")
    if logits:
        return Node("logits")
    if mlp is not None:
        return Node("mlp", int(mlp))
    return Node("head", int(layer), int(head))


def parse_edge(name: str) -> Edge:
    match = _EDGE_RE.match(name.strip())
    if not match:
        raise ValueError(f"not an edge name: {name!r}")
    src, dst = parse_node(match["src"]), parse_node(match["dst"])
    port = match["port"]
    if (dst.kind == "head") != (port is not None):
        raise ValueError(f"head destinations need a q/k/v port, others none: {name!r}")
    return Edge(src, dst, port)


# --- index arithmetic -------------------------------------------------------


def node_index(node: Node, config: ModelConfig) -> int:
    H, L = config.n_heads, config.n_layers
    if node.kind == "input":
        return 0
    if node.kind == "logits":
        return 1 + L * (H + 1)
    if node.layer is None or not 0 <= node.layer < L:
        raise ValueError(f"layer out of range for {node}")
    if node.kind == "mlp":
        return 1 + node.layer * (H + 1) + H
    if node.head is None or not 0 <= node.head < H:
        raise ValueError(f"head out of range for {node}")
    return 1 + node.layer * (H + 1) + node.head


def upstream_count(node: Node, config: ModelConfig) -> int:
    """Number of output-producing nodes that feed ``node`` (a prefix of the node order)."""
    H = config.n_heads
    if node.kind == "input":
        return 0
    if node.kind == "head":
        return 1 + node.layer * (H + 1)
    return node_index(node, config)


def port_index(node: Node, port: str | None, config: ModelConfig) -> int:
    """Position of a destination port in the flat port list used for gradients."""
    H, L = config.n_heads, config.n_layers
    stride = 3 * H + 1
    if node.kind == "logits":
        return L * stride
    if node.kind == "mlp":
        return node.layer * stride + 3 * H
    if node.kind == "head":
        return node.layer * stride + 3 * node.head + "qkv".index(port)
    raise ValueError("the input node has no ports")


def n_ports(config: ModelConfig) -> int:
    return config.n_layers * (3 * config.n_heads + 1) + 1


def all_nodes(config: ModelConfig) -> list[Node]:
    nodes = [Node("input")]
    for layer in range(config.n_layers):
        nodes.extend(Node("head", layer, h) for h in range(config.n_heads))
        nodes.append(Node("mlp", layer))
    nodes.append(Node("logits"))
    return nodes


def expected_counts(n_layers: int, n_heads: int) -> tuple[int, int]:
    """Closed-form (node, edge) counts for sequential attention-then-MLP wiring."""
    L, H = n_layers, n_heads
    edges = sum(3 * H * (1 + i * (H + 1)) + (1 + i * (H + 1) + H) for i in range(L))
    edges += 1 + L * (H + 1)
    return 2 + L + L * H, edges


# --- the graph ---------------------------------------------------------------


class CircuitGraph:
    """All nodes and edges of a model, with per-edge scores and circuit flags.

    Edges are stored column-wise (numpy arrays of source node index,
    destination node index, port code) so that graphs with millions of edges
    stay cheap; :class:`Edge` objects are materialised on demand.
    """

    def __init__(self, config: ModelConfig, src, dst, port, scores=None, in_graph=None, ranks=None):
        self.config = config
        self.nodes = all_nodes(config)
        self.src = np.asarray(src, dtype=np.int32)
        self.dst = np.asarray(dst, dtype=np.int32)
        self.port = np.asarray(port, dtype=np.int8)
        n = len(self.src)
        self.scores = np.zeros(n) if scores is None else np.asarray(scores, dtype=np.float64).copy()
        self.in_graph = np.ones(n, dtype=bool) if in_graph is None else np.asarray(in_graph, dtype=bool).copy()
        self.ranks = np.full(n, -1, dtype=np.int64) if ranks is None else np.asarray(ranks, dtype=np.int64).copy()
        self._names: list[str] | None = None
        self._lookup: dict[str, int] | None = None
        self._port_idx: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.src)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge(self, i: int) -> Edge:
        return Edge(self.nodes[self.src[i]], self.nodes[self.dst[i]], PORTS[self.port[i]])

    @property
    def edges(self) -> list[Edge]:
        return [self.edge(i) for i in range(len(self))]

    @property
    def edge_names(self) -> list[str]:
        if self._names is None:
            node_names = [n.name for n in self.nodes]
            suffix = ["", "<q>", "<k>", "<v>"]
            self._names = [
                f"{node_names[s]}->{node_names[d]}{suffix[p]}"
                for s, d, p in zip(self.src.tolist(), self.dst.tolist(), self.port.tolist())
            ]
        return self._names

    def index(self, edge: Edge | str) -> int:
        if self._lookup is None:
            self._lookup = {name: i for i, name in enumerate(self.edge_names)}
        name = edge if isinstance(edge, str) else format_edge(edge)
        try:
            return self._lookup[name]
        except KeyError:
            raise KeyError(f"edge not in graph: {name}") from None

    def indices(self, edges: Iterable[Edge | str | int]) -> np.ndarray:
        out = [e if isinstance(e, (int, np.integer)) else self.index(e) for e in edges]
        return np.asarray(sorted(set(out)), dtype=np.int64)

    @property
    def port_indices(self) -> np.ndarray:
        """Flat port index (see :func:`port_index`) of every edge's destination."""
        if self._port_idx is None:
            H = self.config.n_heads
            stride = 3 * H + 1
            dst_nodes = self.nodes
            layer = np.array([n.layer if n.layer is not None else -1 for n in dst_nodes])[self.dst]
            head = np.array([n.head if n.head is not None else -1 for n in dst_nodes])[self.dst]
            kind = np.array([n.kind for n in dst_nodes])[self.dst]
            idx = np.where(kind == "mlp", layer * stride + 3 * H, 0)
            idx = np.where(kind == "head", layer * stride + 3 * head + self.port.astype(np.int64) - 1, idx)
            idx = np.where(kind == "logits", self.config.n_layers * stride, idx)
            self._port_idx = idx.astype(np.int64)
        return self._port_idx

    def dest_layers(self) -> np.ndarray:
        """Layer of each edge's destination; logits count as layer ``n_layers``."""
        layers = np.array(
            [n.layer if n.layer is not None else self.config.n_layers for n in self.nodes]
        )
        return layers[self.dst]

    def copy(self) -> "CircuitGraph":
        return CircuitGraph(self.config, self.src, self.dst, self.port, self.scores, self.in_graph, self.ranks)

    def set_scores(self, scores) -> None:
        """Install attribution scores and recompute 1-based ranks."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != self.scores.shape:
            raise ValueError(f"expected {len(self)} scores, got {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        self.scores = scores.copy()
        order = ranked_indices(self)
        self.ranks = np.empty(len(self), dtype=np.int64)
        self.ranks[order] = np.arange(1, len(self) + 1)

    def summary(self) -> dict:
        return {
            "nodes": self.n_nodes,
            "edges": self.n_edges,
            "in_graph": int(self.in_graph.sum()),
        }


def build_graph(config: ModelConfig) -> CircuitGraph:
    """Enumerate every node and legal edge; all edges start in-graph with score 0."""
    nodes = all_nodes(config)
    srcs, dsts, ports = [], [], []
    for j, node in enumerate(nodes):
        n_up = upstream_count(node, config)
        if n_up == 0:
            continue
        up = np.arange(n_up, dtype=np.int32)
        for p in ("q", "k", "v") if node.kind == "head" else (None,):
            srcs.append(up)
            dsts.append(np.full(n_up, j, dtype=np.int32))
            ports.append(np.full(n_up, _PORT_CODE[p], dtype=np.int8))
    return CircuitGraph(config, np.concatenate(srcs), np.concatenate(dsts), np.concatenate(ports))


# --- ranking and circuits -----------------------------------------------------


def ranked_indices(graph: CircuitGraph) -> np.ndarray:
    """Edge indices sorted by |score| descending, ties by display name."""
    names = np.array(graph.edge_names)
    return np.lexsort((names, -np.abs(graph.scores)))


def top_k_edges(graph: CircuitGraph, k: int) -> list[Edge]:
    if k <= 0:
        raise ValueError("k must be positive")
    return [graph.edge(i) for i in ranked_indices(graph)[:k]]


def select_circuit(graph: CircuitGraph, edges: Iterable[Edge | str | int]) -> CircuitGraph:
    """Copy of ``graph`` in which exactly ``edges`` are flagged in-graph."""
    idx = graph.indices(edges)
    out = graph.copy()
    out.in_graph[:] = False
    out.in_graph[idx] = True
    return out


# --- export / import ----------------------------------------------------------


def _node_record(node: Node) -> dict:
    rec = {"name": node.name, "kind": node.kind}
    if node.layer is not None:
        rec["layer"] = node.layer
    if node.head is not None:
        rec["head"] = node.head
    return rec


def circuit_to_dict(graph: CircuitGraph) -> dict:
    node_names = [n.name for n in graph.nodes]
    edges = []
    for i in range(len(graph)):
        rec = {"src": node_names[graph.src[i]], "dst": node_names[graph.dst[i]]}
        if graph.port[i]:
            rec["port"] = PORTS[graph.port[i]]
        rec["score"] = float(graph.scores[i])
        if graph.ranks[i] >= 0:
            rec["rank"] = int(graph.ranks[i])
        rec["in_graph"] = bool(graph.in_graph[i])
        edges.append(rec)
    return {
        "config": graph.config.to_dict(),
        "nodes": [_node_record(n) for n in graph.nodes],
        "edges": edges,
    }


def circuit_from_dict(data: dict) -> CircuitGraph:
    graph = build_graph(ModelConfig.from_dict(data["config"]))
    if len(data["edges"]) != len(graph):
        raise ValueError(f"edge count {len(data['edges'])} does not match config ({len(graph)})")
    for rec in data["edges"]:
        name = f"{rec['src']}->{rec['dst']}" + (f"<{rec['port']}>" if rec.get("port") else "")
        i = graph.index(name)
        graph.scores[i] = rec["score"]
        graph.in_graph[i] = rec["in_graph"]
        graph.ranks[i] = rec.get("rank", -1)
    return graph


def to_dot(graph: CircuitGraph) -> str:
    lines = ["digraph circuit {", "  node [style=filled, shape=box];"]
    for node in graph.nodes:
        lines.append(f'  "{node.name}" [fillcolor={NODE_COLORS[node.kind]}];')
    for i in np.flatnonzero(graph.in_graph):
        src, dst = graph.nodes[graph.src[i]].name, graph.nodes[graph.dst[i]].name
        attrs = f' [label="{PORTS[graph.port[i]]}"]' if graph.port[i] else ""
        lines.append(f'  "{src}" -> "{dst}"{attrs};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_circuit(graph: CircuitGraph, fmt: str, path: str | os.PathLike) -> None:
    if fmt == "dot":
        text = to_dot(graph)
    elif fmt == "json":
        text = json.dumps(circuit_to_dict(graph))
    else:
        raise ValueError(f"unknown export format {fmt!r} (expected dot or json)")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_circuit(path: str | os.PathLike) -> CircuitGraph:
    with open(path, encoding="utf-8") as fh:
        return circuit_from_dict(json.load(fh))


def write_scores_csv(graph: CircuitGraph, path: str | os.PathLike) -> None:
    """Score dump: edge_name, score, rank, in_graph; rows ordered by rank then name."""
    order = ranked_indices(graph)
    names = graph.edge_names
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("edge_name,score,rank,in_graph\n")
        for pos, i in enumerate(order, start=1):
            rank = graph.ranks[i] if graph.ranks[i] >= 0 else pos
            fh.write(f"{names[i]},{float(graph.scores[i])!r},{rank},{int(graph.in_graph[i])}\n")


def read_scores_csv(path: str | os.PathLike) -> list[tuple[str, float]]:
    """Edge names and scores from a score dump, in file (rank) order."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["edge_name", "score"]:
            raise ValueError(f"{path}: not a score dump (header {header})")
        for line in fh:
            if line.strip():
                name, score = line.split(",")[:2]
                rows.append((name, float(score)))
    return rows


def edges_from_names(names: Sequence[str]) -> list[Edge]:
    return [parse_edge(n) for n in names]

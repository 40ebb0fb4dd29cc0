"""Edge-level computational graph of a pre-norm transformer, and circuits over it.

Nodes are the input embedding, every attention head, every MLP and the
logits.  A node's input is the sum of the outputs of all upstream nodes, and
each attention head reads that sum through three separate channels (Q, K, V),
so one (source, head) pair contributes three edges.

Edges are stored as flat integer arrays so that GPT-2-XL-sized graphs
(over two million edges) build in milliseconds.  Canonical edge order is by
destination channel, then by source node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

INPUT, HEAD, MLP, LOGITS = "input", "head", "mlp", "logits"
HEAD_CHANNELS = ("Q", "K", "V")
MLP_CHANNEL = "MlpIn"
LOGITS_CHANNEL = "LogitsIn"
CIRCUIT_FORMAT_VERSION = 1


class GraphMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    kind: str
    layer: int = -1
    head: int = -1

    @property
    def name(self) -> str:
        if self.kind == HEAD:
            return f"a{self.layer}.h{self.head}"
        if self.kind == MLP:
            return f"m{self.layer}"
        return self.kind

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, name: str) -> Node:
        if name in (INPUT, LOGITS):
            return cls(name)
        if name.startswith("a") and ".h" in name:
            layer, head = name[1:].split(".h")
            return cls(HEAD, int(layer), int(head))
        if name.startswith("m"):
            return cls(MLP, int(name[1:]))
        raise ValueError(f"unrecognized node name {name!r}")


@dataclass(frozen=True)
class Edge:
    index: int
    src: Node
    dst: Node
    channel: str

    @property
    def name(self) -> str:
        return f"{self.src.name}->{self.dst.name}<{self.channel}>"


class ComputationalGraph:
    """Complete edge enumeration for ``n_layers`` x ``n_heads``.

    Upstream node order: input, then per layer the heads followed by the MLP.
    Channel order: per layer, each head's Q, K, V, then the MLP input; the
    logits input comes last.
    """

    def __init__(self, n_layers: int, n_heads: int, config_hash: str = ""):
        if n_layers < 0 or n_heads < 1:
            raise ValueError(f"invalid graph dims: n_layers={n_layers}, n_heads={n_heads}")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.config_hash = config_hash
        H = n_heads
        self.nodes: list[Node] = [Node(INPUT)]
        for layer in range(n_layers):
            self.nodes.extend(Node(HEAD, layer, h) for h in range(H))
            self.nodes.append(Node(MLP, layer))
        self.n_upstream = len(self.nodes)
        self.nodes.append(Node(LOGITS))
        self.n_nodes = len(self.nodes)
        self.logits_index = self.n_nodes - 1

        chan_node, chan_kind, counts = [], [], []
        for layer in range(n_layers):
            n_up = 1 + layer * (H + 1)
            for h in range(H):
                for c in HEAD_CHANNELS:
                    chan_node.append(self.head_index(layer, h))
                    chan_kind.append(c)
                    counts.append(n_up)
            chan_node.append(self.mlp_index(layer))
            chan_kind.append(MLP_CHANNEL)
            counts.append(n_up + H)
        chan_node.append(self.logits_index)
        chan_kind.append(LOGITS_CHANNEL)
        counts.append(self.n_upstream)

        self.channel_node = np.asarray(chan_node, dtype=np.int64)
        self.channel_kind: list[str] = chan_kind
        self.channel_upstream = np.asarray(counts, dtype=np.int64)
        self.n_channels = len(chan_kind)
        self.channel_offset = np.concatenate([[0], np.cumsum(self.channel_upstream)[:-1]])
        self.n_edges = int(self.channel_upstream.sum())

        self.edge_channel = np.repeat(np.arange(self.n_channels, dtype=np.int64), self.channel_upstream)
        self.edge_src = np.arange(self.n_edges, dtype=np.int64) - np.repeat(self.channel_offset, self.channel_upstream)
        self.edge_dst = self.channel_node[self.edge_channel]
        for arr in (self.channel_node, self.channel_upstream, self.channel_offset, self.edge_channel, self.edge_src, self.edge_dst):
            arr.flags.writeable = False
        self._node_pos = {n.name: i for i, n in enumerate(self.nodes)}

    def __repr__(self) -> str:
        return f"ComputationalGraph(n_layers={self.n_layers}, n_heads={self.n_heads}, n_edges={self.n_edges})"

    def __len__(self) -> int:
        return self.n_edges

    # -- indexing ------------------------------------------------------------

    def head_index(self, layer: int, head: int) -> int:
        return 1 + layer * (self.n_heads + 1) + head

    def mlp_index(self, layer: int) -> int:
        return 1 + layer * (self.n_heads + 1) + self.n_heads

    def node_index(self, node: Node | str) -> int:
        name = node if isinstance(node, str) else node.name
        try:
            return self._node_pos[name]
        except KeyError:
            raise KeyError(f"node {name!r} not in graph {self!r}") from None

    def channel_index(self, node: Node | str, channel: str) -> int:
        idx = self.node_index(node)
        kind = self.nodes[idx].kind
        if kind == HEAD:
            n = self.nodes[idx]
            if channel not in HEAD_CHANNELS:
                raise KeyError(f"head channel must be one of {HEAD_CHANNELS}, got {channel!r}")
            return n.layer * (3 * self.n_heads + 1) + 3 * n.head + HEAD_CHANNELS.index(channel)
        if kind == MLP and channel == MLP_CHANNEL:
            return self.nodes[idx].layer * (3 * self.n_heads + 1) + 3 * self.n_heads
        if kind == LOGITS and channel == LOGITS_CHANNEL:
            return self.n_channels - 1
        raise KeyError(f"node {self.nodes[idx].name} has no input channel {channel!r}")

    def channel_name(self, c: int) -> str:
        return f"{self.nodes[self.channel_node[c]].name}<{self.channel_kind[c]}>"

    def edge_index(self, src: Node | str, dst: Node | str, channel: str) -> int:
        c = self.channel_index(dst, channel)
        s = self.node_index(src)
        if s >= self.channel_upstream[c]:
            raise KeyError(f"no edge {src}->{dst}<{channel}>: source is not upstream")
        return int(self.channel_offset[c] + s)

    def edge(self, i: int) -> Edge:
        if not 0 <= i < self.n_edges:
            raise IndexError(f"edge index {i} out of range [0, {self.n_edges})")
        c = int(self.edge_channel[i])
        return Edge(i, self.nodes[self.edge_src[i]], self.nodes[self.channel_node[c]], self.channel_kind[c])

    def edges(self) -> Iterator[Edge]:
        for i in range(self.n_edges):
            yield self.edge(i)

    def upstream_nodes(self) -> list[Node]:
        return self.nodes[: self.n_upstream]


def build_graph(config) -> ComputationalGraph:
    """Graph for a model config (anything with ``n_layers``/``n_heads``)."""
    h = config.hash() if hasattr(config, "hash") else ""
    return ComputationalGraph(config.n_layers, config.n_heads, h)


def expected_edge_count(n_layers: int, n_heads: int) -> int:
    """Closed-form edge total, independent of the enumeration."""
    L, H = n_layers, n_heads
    heads = sum(3 * H * (1 + (H + 1) * l) for l in range(L))
    mlps = sum((H + 1) * l + H + 1 for l in range(L))
    return heads + mlps + 1 + L * H + L


# -- circuits -----------------------------------------------------------------


@dataclass(eq=False)
class Circuit:
    graph: ComputationalGraph
    edge_mask: np.ndarray
    provenance: dict = field(default_factory=dict)
    scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        mask = np.asarray(self.edge_mask, dtype=bool)
        if mask.shape != (self.graph.n_edges,):
            raise ValueError(f"edge mask has shape {mask.shape}, graph has {self.graph.n_edges} edges")
        mask = mask.copy()
        mask.flags.writeable = False
        self.edge_mask = mask

    @classmethod
    def from_edges(cls, graph: ComputationalGraph, indices, **provenance) -> Circuit:
        mask = np.zeros(graph.n_edges, dtype=bool)
        mask[np.asarray(list(indices), dtype=np.int64)] = True
        return cls(graph, mask, dict(provenance))

    @classmethod
    def full(cls, graph: ComputationalGraph) -> Circuit:
        return cls(graph, np.ones(graph.n_edges, dtype=bool), {"method": "full"})

    @classmethod
    def empty(cls, graph: ComputationalGraph) -> Circuit:
        return cls(graph, np.zeros(graph.n_edges, dtype=bool), {"method": "empty"})

    @property
    def n_edges(self) -> int:
        return int(self.edge_mask.sum())

    @property
    def edge_indices(self) -> np.ndarray:
        return np.flatnonzero(self.edge_mask)

    @property
    def node_mask(self) -> np.ndarray:
        g = self.graph
        m = np.zeros(g.n_nodes, dtype=bool)
        m[g.edge_src[self.edge_mask]] = True
        m[g.edge_dst[self.edge_mask]] = True
        return m

    @property
    def nodes(self) -> list[Node]:
        return [self.graph.nodes[i] for i in np.flatnonzero(self.node_mask)]

    def edges(self) -> list[Edge]:
        return [self.graph.edge(int(i)) for i in self.edge_indices]

    def same_edges(self, other: Circuit) -> bool:
        return self.graph.n_edges == other.graph.n_edges and bool(np.array_equal(self.edge_mask, other.edge_mask))

    def __repr__(self) -> str:
        return f"Circuit({self.n_edges}/{self.graph.n_edges} edges, {int(self.node_mask.sum())} nodes)"


def prune(circuit: Circuit) -> Circuit:
    """Drop dangling nodes and their edges until nothing changes.

    A non-input node without incoming circuit edges, or a non-logits node
    without outgoing circuit edges, is removed along with its edges.
    """
    g = circuit.graph
    mask = circuit.edge_mask.copy()
    keep_in = np.zeros(g.n_nodes, dtype=bool)
    keep_in[0] = True  # input needs no parents
    keep_out = np.zeros(g.n_nodes, dtype=bool)
    keep_out[g.logits_index] = True  # logits need no children
    while True:
        src, dst = g.edge_src[mask], g.edge_dst[mask]
        has_out = np.bincount(src, minlength=g.n_nodes) > 0
        has_in = np.bincount(dst, minlength=g.n_nodes) > 0
        dead = ~(has_in | keep_in) | ~(has_out | keep_out)
        new = mask & ~dead[g.edge_src] & ~dead[g.edge_dst]
        if np.array_equal(new, mask):
            break
        mask = new
    return Circuit(g, mask, dict(circuit.provenance), circuit.scores)


def extract_circuit(graph: ComputationalGraph, scores, n: int, **provenance) -> Circuit:
    """Top-``n`` edges by |score| (ties by edge index), then pruned."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (graph.n_edges,):
        raise ValueError(f"scores have shape {scores.shape}, graph has {graph.n_edges} edges")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    order = np.argsort(-np.abs(scores), kind="stable")
    mask = np.zeros(graph.n_edges, dtype=bool)
    mask[order[:n]] = True
    provenance.setdefault("n", int(n))
    provenance.setdefault("config_hash", graph.config_hash)
    return prune(Circuit(graph, mask, provenance, scores))


@dataclass(frozen=True)
class PrecisionRecall:
    edge_precision: float
    edge_recall: float
    node_precision: float
    node_recall: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "edge_precision": self.edge_precision,
            "edge_recall": self.edge_recall,
            "node_precision": self.node_precision,
            "node_recall": self.node_recall,
            "degenerate": self.degenerate,
        }


def _pr(cand: np.ndarray, ref: np.ndarray) -> tuple[float, float, bool]:
    inter = int(np.count_nonzero(cand & ref))
    nc, nr = int(cand.sum()), int(ref.sum())
    degenerate = nc == 0 or nr == 0
    # empty sets are vacuously precise / fully recalled; flagged degenerate
    precision = inter / nc if nc else 1.0
    recall = inter / nr if nr else 1.0
    return precision, recall, degenerate


def precision_recall(candidate: Circuit, reference: Circuit) -> PrecisionRecall:
    gc, gr = candidate.graph, reference.graph
    if (gc.n_layers, gc.n_heads, gc.config_hash) != (gr.n_layers, gr.n_heads, gr.config_hash):
        raise GraphMismatchError(
            f"circuits come from different graphs: {gc!r} [{gc.config_hash}] vs {gr!r} [{gr.config_hash}]"
        )
    ep, er, d1 = _pr(candidate.edge_mask, reference.edge_mask)
    np_, nr, d2 = _pr(candidate.node_mask, reference.node_mask)
    return PrecisionRecall(ep, er, np_, nr, d1 or d2)


# -- import / export ------------------------------------------------------------


def circuit_to_dict(circuit: Circuit) -> dict:
    g = circuit.graph
    prov = circuit.provenance
    edges = []
    for i in circuit.edge_indices:
        e = g.edge(int(i))
        score = None if circuit.scores is None else float(circuit.scores[i])
        edges.append({"src": e.src.name, "dst": e.dst.name, "channel": e.channel, "score": score})
    return {
        "version": CIRCUIT_FORMAT_VERSION,
        "model_config_hash": g.config_hash,
        "n_layers": g.n_layers,
        "n_heads": g.n_heads,
        "method": prov.get("method"),
        "k": prov.get("k"),
        "n": prov.get("n"),
        "nodes": [n.name for n in circuit.nodes],
        "edges": edges,
    }


def circuit_to_json(circuit: Circuit) -> str:
    return json.dumps(circuit_to_dict(circuit), indent=2) + "\n"


def circuit_from_dict(d: dict, graph: ComputationalGraph, check_hash: bool = True) -> Circuit:
    if d.get("version") != CIRCUIT_FORMAT_VERSION:
        raise ValueError(f"unsupported circuit format version {d.get('version')!r}")
    if check_hash and d.get("model_config_hash", "") != graph.config_hash:
        raise GraphMismatchError(
            f"circuit was built for config {d.get('model_config_hash')!r}, graph is {graph.config_hash!r}"
        )
    idx = [graph.edge_index(e["src"], e["dst"], e["channel"]) for e in d["edges"]]
    mask = np.zeros(graph.n_edges, dtype=bool)
    mask[idx] = True
    scores = None
    if d["edges"] and all(e.get("score") is not None for e in d["edges"]):
        scores = np.zeros(graph.n_edges)
        scores[idx] = [e["score"] for e in d["edges"]]
    prov = {k: d.get(k) for k in ("method", "k", "n")}
    prov["config_hash"] = d.get("model_config_hash", "")
    return Circuit(graph, mask, prov, scores)


def circuit_from_json(text: str, graph: ComputationalGraph, check_hash: bool = True) -> Circuit:
    return circuit_from_dict(json.loads(text), graph, check_hash)


def graph_for_circuit_file(d: dict) -> ComputationalGraph:
    """Rebuild the bare graph a circuit file refers to."""
    return ComputationalGraph(int(d["n_layers"]), int(d["n_heads"]), d.get("model_config_hash", ""))


def to_dot(circuit: Circuit, name: str = "circuit") -> str:
    lines = [f"digraph {name} {{", "  rankdir=BT;", "  node [shape=box];"]
    for node in circuit.nodes:
        lines.append(f'  "{node.name}";')
    for e in circuit.edges():
        label = e.channel
        if circuit.scores is not None:
            label += f" {circuit.scores[e.index]:.3g}"
        lines.append(f'  "{e.src.name}" -> "{e.dst.name}" [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"

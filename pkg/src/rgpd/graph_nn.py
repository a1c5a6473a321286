"""Graphs and the graph layers: GCN, multi-head GATConv and the graph-convolutional GRU."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .nn import ParamGroup, xavier_uniform, zeros


@dataclass(frozen=True)
class Graph:
    """Directed edge list over ``num_nodes`` nodes; edges are ``(source, target)``."""

    num_nodes: int
    edges: Tuple[Tuple[int, int], ...]
    includes_self_loops: bool = False
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError("graph needs at least one node")
        seen = set()
        for s, t in self.edges:
            if not (0 <= s < self.num_nodes and 0 <= t < self.num_nodes):
                raise ValueError(f"edge ({s}, {t}) out of range for {self.num_nodes} nodes")
            if (s, t) in seen:
                raise ValueError(f"duplicate edge ({s}, {t})")
            seen.add((s, t))
        if self.includes_self_loops and any((i, i) not in seen for i in range(self.num_nodes)):
            raise ValueError("includes_self_loops set but a self-loop is missing")

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[Tuple[int, int]], self_loops: bool = True) -> "Graph":
        es = sorted(set((int(s), int(t)) for s, t in edges if s != t))
        if self_loops:
            es = sorted(es + [(i, i) for i in range(num_nodes)])
        return cls(num_nodes, tuple(es), includes_self_loops=self_loops)

    def adjacency(self) -> np.ndarray:
        """Dense matrix with ``A[target, source] = 1``: row i lists i's in-neighbours."""
        if "adj" not in self._cache:
            A = np.zeros((self.num_nodes, self.num_nodes))
            for s, t in self.edges:
                A[t, s] = 1.0
            self._cache["adj"] = A
        return self._cache["adj"]

    def normalized_adjacency(self) -> np.ndarray:
        """``D̃^(-1/2) Ã D̃^(-1/2)`` with ``d̃_i = Σ_j Ã_ij``."""
        if "norm" not in self._cache:
            if not self.includes_self_loops:
                raise ValueError("normalized adjacency needs self-loops (degree could be zero)")
            A = self.adjacency()
            d = A.sum(axis=1)
            inv = 1.0 / np.sqrt(d)
            self._cache["norm"] = inv[:, None] * A * inv[None, :]
        return self._cache["norm"]

    def degree(self, node: int, include_self: bool = False) -> int:
        return sum(1 for s, t in self.edges if t == node and (include_self or s != t))

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        return Graph(self.num_nodes, tuple(sorted((perm[s], perm[t]) for s, t in self.edges)),
                     self.includes_self_loops)

    # edge-list text format: first line num_nodes, then "src dst" per line
    def to_text(self) -> str:
        return "\n".join([str(self.num_nodes)] + [f"{s} {t}" for s, t in self.edges]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Graph":
        lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or len(lines[0]) != 1:
            raise ValueError("edge-list text must start with the node count")
        n = int(lines[0][0])
        edges = []
        for i, parts in enumerate(lines[1:], start=2):
            if len(parts) != 2:
                raise ValueError(f"line {i}: expected 'src dst'")
            edges.append((int(parts[0]), int(parts[1])))
        loops = all((j, j) in set(edges) for j in range(n))
        return cls(n, tuple(edges), includes_self_loops=loops)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Graph":
        return cls.from_text(Path(path).read_text())


def build_temporal_chain_graph(window_length: int) -> Graph:
    """Time steps as nodes, undirected edges between neighbours, plus self-loops."""
    if window_length < 1:
        raise ValueError("window_length must be >= 1")
    edges = []
    for i in range(window_length - 1):
        edges += [(i, i + 1), (i + 1, i)]
    return Graph.from_edges(window_length, edges)


def build_channel_correlation_graph(train_data, threshold: float = 0.5) -> Graph:
    """Channels as nodes; edge when ``|Pearson r| >= threshold``.

    ``train_data`` is a ``samples × channels`` array or a sequence of them.
    Constant channels only get their self-loop.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    if isinstance(train_data, np.ndarray):
        data = np.asarray(train_data, dtype=float)
    else:
        parts = [np.asarray(p, dtype=float) for p in train_data]
        if not parts:
            raise ValueError("empty training data")
        data = np.concatenate(parts, axis=0)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("empty training data")
    if data.shape[0] < 2:
        raise ValueError("need at least two samples per channel")
    corr = channel_correlation(data)
    n = data.shape[1]
    edges = [(i, j) for i in range(n) for j in range(n)
             if i != j and np.isfinite(corr[i, j]) and abs(corr[i, j]) >= threshold]
    return Graph.from_edges(n, edges)


def channel_correlation(data: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix; NaN wherever a channel is constant."""
    centred = data - data.mean(axis=0)
    std = np.sqrt((centred ** 2).sum(axis=0))
    const = std < 1e-12
    safe = np.where(const, 1.0, std)
    corr = (centred.T @ centred) / np.outer(safe, safe)
    corr[const, :] = np.nan
    corr[:, const] = np.nan
    return corr


# -- GCN ---------------------------------------------------------------------

def graph_conv(H: Tensor, graph: Graph) -> Tensor:
    """``Â·H`` over the node axis (second to last) of ``H``."""
    return ops.matmul(Tensor(graph.normalized_adjacency(), _check=False), H)


def gcn_layer(H: Tensor, graph: Graph, W: Tensor, activation=ops.relu) -> Tensor:
    """``σ(D̃^(-1/2) Ã D̃^(-1/2) H W)`` for ``H`` of shape ``[..., N, F]``."""
    if not graph.includes_self_loops:
        raise ValueError("gcn_layer needs a graph with self-loops")
    if H.shape[-2] != graph.num_nodes:
        raise ValueError(f"H has {H.shape[-2]} nodes, graph has {graph.num_nodes}")
    out = ops.matmul(graph_conv(H, graph), W)
    return out if activation is None else activation(out)


# -- GATConv -------------------------------------------------------------------

def init_gat_params(rng: np.random.Generator, in_dim: int, out_dim: int, heads: int = 2) -> ParamGroup:
    if heads < 1:
        raise ValueError("need at least one head")
    return {
        "W": xavier_uniform(rng, in_dim, out_dim, shape=(heads, in_dim, out_dim)),
        "a_src": xavier_uniform(rng, 2 * out_dim, 1, shape=(heads, out_dim, 1)),
        "a_dst": xavier_uniform(rng, 2 * out_dim, 1, shape=(heads, out_dim, 1)),
    }


def gat_attention(H: Tensor, graph: Graph, params: ParamGroup, slope: float = 0.2):
    """Per-head attention ``α[..., k, i, j]`` over in-neighbours ``j`` of ``i`` and ``W^k H``."""
    adj = graph.adjacency()
    if not np.all(adj.sum(axis=1) > 0):
        raise ValueError("every node needs an in-neighbour (add self-loops)")
    if H.shape[-2] != graph.num_nodes:
        raise ValueError(f"H has {H.shape[-2]} nodes, graph has {graph.num_nodes}")
    # [..., 1, N, F] @ [K, F, F'] -> [..., K, N, F']
    Wh = ops.matmul(ops.reshape(H, H.shape[:-2] + (1,) + H.shape[-2:]), params["W"])
    # aᵀ[Wh_i ‖ Wh_j] splits into a_dst·Wh_i + a_src·Wh_j
    e_i = ops.matmul(Wh, params["a_dst"])
    e_j = ops.swapaxes(ops.matmul(Wh, params["a_src"]), -1, -2)
    e = ops.leaky_relu(e_i + e_j, slope)
    alpha = ops.softmax(e, axis=-1, mask=adj > 0)
    return alpha, Wh


def gat_forward(H: Tensor, graph: Graph, params: ParamGroup, slope: float = 0.2,
                activation=ops.elu) -> Tensor:
    """Multi-head GATConv with head averaging: ``σ((1/K) Σ_k Σ_j α^k_ij W^k h_j)``."""
    alpha, Wh = gat_attention(H, graph, params, slope)
    agg = ops.mean(ops.matmul(alpha, Wh), axis=-3)
    return agg if activation is None else activation(agg)


# -- GCRN ------------------------------------------------------------------------

GATES = ("z", "r", "h")


def init_gcrn_params(rng: np.random.Generator, in_dim: int, hidden: int) -> ParamGroup:
    params: ParamGroup = {}
    for g in GATES:
        params[f"W_{g}"] = xavier_uniform(rng, in_dim, hidden)
        params[f"U_{g}"] = xavier_uniform(rng, hidden, hidden)
        params[f"b_{g}"] = zeros(hidden)
    return params


def gcrn_step(x_t: Tensor, h_prev: Tensor, graph: Graph, params: ParamGroup) -> Tensor:
    """One GRU step whose ``W·x`` and ``U·h`` terms are graph convolutions.

    The printed update-gate term ``U_z U_{t-1}`` is read as ``U_z h_{t-1}``.
    """
    H = params["U_z"].shape[0]
    if h_prev.shape[-1] != H or x_t.shape[-1] != params["W_z"].shape[0]:
        raise ValueError(f"gcrn_step shape mismatch: x {x_t.shape}, h {h_prev.shape}")
    ax = graph_conv(x_t, graph)
    ah = graph_conv(h_prev, graph)
    wx = ops.matmul(ax, ops.concat([params["W_z"], params["W_r"], params["W_h"]], axis=1))
    uh = ops.matmul(ah, ops.concat([params["U_z"], params["U_r"]], axis=1))
    z = ops.sigmoid(wx[..., :H] + uh[..., :H] + params["b_z"])
    r = ops.sigmoid(wx[..., H:2 * H] + uh[..., H:] + params["b_r"])
    h_tilde = ops.tanh(wx[..., 2 * H:] + r * ops.matmul(ah, params["U_h"]) + params["b_h"])
    return (1.0 - z) * h_prev + z * h_tilde


def gcrn_unroll(X: Tensor, graph: Graph, params: ParamGroup, h0: Optional[Tensor] = None) -> Tensor:
    """Run :func:`gcrn_step` over axis -3 of ``X`` (``[..., S, N, F]``) -> ``[..., S, N, H]``."""
    if X.ndim < 3 or X.shape[-3] == 0:
        raise ValueError("gcrn_unroll needs a non-empty sequence")
    H = params["U_z"].shape[0]
    if h0 is None:
        h0 = Tensor(np.zeros(X.shape[:-3] + X.shape[-2:-1] + (H,)), _check=False)
    h = h0
    states = []
    for s in range(X.shape[-3]):
        h = gcrn_step(X[..., s, :, :], h, graph, params)
        states.append(h)
    return ops.stack(states, axis=-3)


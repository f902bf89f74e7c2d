"""Graph values, random generation, Laplacians, hop distances and permutations.

A dense order-k tensor over ``n`` nodes is represented as a numpy array of
shape ``(n,) * k + (d,)``: the first ``k`` axes are node axes, the last one
holds channels.
"""
from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

__all__ = [
    "UNREACHABLE",
    "Graph",
    "barabasi_albert",
    "adjacency_matrix",
    "normalized_laplacian",
    "hop_distances",
    "check_permutation",
    "invert_permutation",
    "permute_graph",
    "permute_tensor",
    "graph_to_dense",
    "triangle_count",
    "save_graph",
    "load_graph",
    "dumps_graph",
    "loads_graph",
]

UNREACHABLE = np.inf


def _feature_matrix(feat, rows: int, what: str) -> np.ndarray:
    if feat is None:
        return np.zeros((rows, 0))
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim == 1 and feat.size == rows:
        feat = feat[:, None]
    if feat.ndim != 2 or feat.shape[0] != rows:
        if feat.size == 0:
            return np.zeros((rows, 0))
        raise ValueError(f"{what} features must have {rows} rows, got shape {feat.shape}")
    return feat


@dataclass(eq=False)
class Graph:
    """Undirected graph with optional node and edge features.

    ``edges`` is an ``(m, 2)`` integer array. Feature matrices default to zero
    columns.
    """

    n: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None

    def __post_init__(self):
        self.n = int(self.n)
        if self.n < 0:
            raise ValueError("node count must be non-negative")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.n):
            raise ValueError(f"edge endpoints must lie in [0, {self.n})")
        seen = set()
        for u, v in edges.tolist():
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        self.edges = edges
        self.node_features = _feature_matrix(self.node_features, self.n, "node")
        self.edge_features = _feature_matrix(self.edge_features, len(edges), "edge")

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def feat_dim_node(self) -> int:
        return self.node_features.shape[1]

    @property
    def feat_dim_edge(self) -> int:
        return self.edge_features.shape[1]

    def degrees(self) -> np.ndarray:
        return adjacency_matrix(self).sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.edge_features, other.edge_features)
        )

    def __repr__(self):
        return f"Graph(n={self.n}, m={self.m}, feat_dim_node={self.feat_dim_node}, feat_dim_edge={self.feat_dim_edge})"


def barabasi_albert(n: int, k: int, seed) -> Graph:
    """Preferential-attachment graph.

    Starts from ``k`` isolated seed nodes; every later node links to ``k``
    distinct earlier nodes drawn with probability proportional to
    ``degree + 1``. The result has exactly ``(n - k) * k`` edges.
    """
    if not 2 <= k < n:
        raise ValueError(f"barabasi_albert needs 2 <= k < n, got n={n}, k={k}")
    rng = make_rng(seed)
    degree = np.zeros(n)
    edges = []
    for v in range(k, n):
        weights = degree[:v] + 1.0
        targets = rng.choice(v, size=k, replace=False, p=weights / weights.sum())
        for u in sorted(targets.tolist()):
            edges.append((u, v))
            degree[u] += 1
            degree[v] += 1
    return Graph(n, np.array(edges, dtype=np.int64))


def adjacency_matrix(g: Graph) -> np.ndarray:
    a = np.zeros((g.n, g.n))
    if g.m:
        a[g.edges[:, 0], g.edges[:, 1]] = 1.0
        a[g.edges[:, 1], g.edges[:, 0]] = 1.0
    return a


def normalized_laplacian(g: Graph) -> np.ndarray:
    """I - D^-1/2 A D^-1/2, with 0^-1/2 taken as 0 for isolated nodes."""
    a = adjacency_matrix(g)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(g.n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def hop_distances(g: Graph) -> np.ndarray:
    """All-pairs BFS distances; unreachable pairs hold ``UNREACHABLE``."""
    nbrs = [[] for _ in range(g.n)]
    for u, v in g.edges.tolist():
        if u != v:
            nbrs[u].append(v)
            nbrs[v].append(u)
    dist = np.full((g.n, g.n), UNREACHABLE)
    for s in range(g.n):
        dist[s, s] = 0.0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if dist[s, w] == UNREACHABLE:
                    dist[s, w] = dist[s, u] + 1.0
                    queue.append(w)
    return dist


def check_permutation(pi, n: int | None = None) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64).ravel()
    if n is not None and len(pi) != n:
        raise ValueError(f"permutation has length {len(pi)}, expected {n}")
    if not np.array_equal(np.sort(pi), np.arange(len(pi))):
        raise ValueError("pi is not a bijection on [n]")
    return pi


def invert_permutation(pi) -> np.ndarray:
    pi = check_permutation(pi)
    inv = np.empty_like(pi)
    inv[pi] = np.arange(len(pi))
    return inv


def permute_graph(g: Graph, pi) -> Graph:
    """Relabel node ``i`` as ``pi[i]``; edge features travel with their edges."""
    pi = check_permutation(pi, g.n)
    node_features = np.empty_like(g.node_features)
    node_features[pi] = g.node_features
    edges = pi[g.edges] if g.m else g.edges.copy()
    return Graph(g.n, edges, node_features, g.edge_features.copy())


def permute_tensor(x: np.ndarray, pi, order: int | None = None) -> np.ndarray:
    """(pi . X)_i = X_{pi^-1(i)} on the first ``order`` axes (default ndim - 1)."""
    x = np.asarray(x)
    order = x.ndim - 1 if order is None else order
    if order < 0 or order > x.ndim:
        raise ValueError(f"order {order} incompatible with array of ndim {x.ndim}")
    if order == 0:
        # invariant quantity: nothing to relabel
        return x
    n = x.shape[0]
    if any(x.shape[a] != n for a in range(order)):
        raise ValueError(f"node axes of shape {x.shape[:order]} are not all equal")
    inv = invert_permutation(check_permutation(pi, n))
    out = x
    for axis in range(order):
        out = np.take(out, inv, axis=axis)
    return out


def graph_to_dense(g: Graph) -> np.ndarray:
    """Order-2 tensor of shape (n, n, 2 + C_node + C_edge).

    Channel 0 is the symmetric adjacency, channel 1 marks the diagonal, node
    features sit on the diagonal and edge features on both (u, v) and (v, u).
    """
    cn, ce = g.feat_dim_node, g.feat_dim_edge
    x = np.zeros((g.n, g.n, 2 + cn + ce))
    x[:, :, 0] = adjacency_matrix(g)
    idx = np.arange(g.n)
    x[idx, idx, 1] = 1.0
    if cn:
        x[idx, idx, 2 : 2 + cn] = g.node_features
    if ce and g.m:
        u, v = g.edges[:, 0], g.edges[:, 1]
        x[u, v, 2 + cn :] = g.edge_features
        x[v, u, 2 + cn :] = g.edge_features
    return x


def triangle_count(g: Graph) -> int:
    """Number of triangles, by checking every node triple."""
    a = adjacency_matrix(g) > 0
    return sum(
        1 for i, j, k in itertools.combinations(range(g.n), 3) if a[i, j] and a[j, k] and a[i, k]
    )


# -- line-delimited JSON graph files -------------------------------------------------


def dumps_graph(g: Graph) -> str:
    lines = [json.dumps({"n": g.n, "feat_dim_node": g.feat_dim_node, "feat_dim_edge": g.feat_dim_edge})]
    for i in range(g.n):
        lines.append(json.dumps({"id": i, "feat": g.node_features[i].tolist()}))
    for e in range(g.m):
        u, v = g.edges[e].tolist()
        lines.append(json.dumps({"u": u, "v": v, "feat": g.edge_features[e].tolist()}))
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> Graph:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records or "n" not in records[0]:
        raise ValueError("graph file must start with a header record")
    header = records[0]
    n, cn, ce = header["n"], header.get("feat_dim_node", 0), header.get("feat_dim_edge", 0)
    node_recs = records[1 : 1 + n]
    edge_recs = records[1 + n :]
    if len(node_recs) != n or any("u" in r for r in node_recs):
        raise ValueError(f"expected {n} node records after the header")
    node_features = np.zeros((n, cn))
    for rec in node_recs:
        feat = rec.get("feat", [])
        if len(feat) != cn:
            raise ValueError(f"node {rec.get('id')} has {len(feat)} features, expected {cn}")
        node_features[rec["id"]] = feat
    edges = np.array([[r["u"], r["v"]] for r in edge_recs], dtype=np.int64).reshape(-1, 2)
    edge_features = np.array([r.get("feat", []) for r in edge_recs], dtype=np.float64).reshape(len(edge_recs), ce)
    return Graph(n, edges, node_features, edge_features)


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(dumps_graph(g))


def load_graph(path) -> Graph:
    return loads_graph(Path(path).read_text())

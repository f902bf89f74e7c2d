"""Turn graphs and dense tensors into token sequences.

Every non-special token carries ``[features | P_{i_1} ... P_{i_k} | E^type]``.
Special tokens (``[graph]``, ``[null]``) have an all-zero channel row and are
replaced by their own embedding in :func:`project_input`.

For sparse graphs the feature block is ``[node features | edge features]``:
node tokens fill the first part, edge tokens the second, the rest is zero.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .equivariant import class_index_tensor, class_of, enumerate_classes
from .graphs import Graph
from .identifiers import NodeIdentifiers, TypeIdentifiers

__all__ = [
    "SPECIAL_KINDS",
    "Token",
    "TokenSequence",
    "InputProjection",
    "tokenize_sparse",
    "tokenize_dense",
    "prepend_special",
    "project_input",
]

SPECIAL_KINDS = ("graph_special", "null_special")


class Token(NamedTuple):
    kind: str
    multi_index: tuple
    channels: np.ndarray


@dataclass(frozen=True)
class TokenSequence:
    channels: np.ndarray
    kinds: tuple
    multi_indices: tuple
    type_index: np.ndarray
    n: int
    k: int
    C: int
    d_p: int
    d_e: int
    special_embeddings: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.kinds)

    @property
    def width(self) -> int:
        return self.C + self.k * self.d_p + self.d_e

    @property
    def tokens(self) -> list:
        return [Token(kd, mi, ch) for kd, mi, ch in zip(self.kinds, self.multi_indices, self.channels)]

    @property
    def is_special(self) -> np.ndarray:
        return np.array([kd in SPECIAL_KINDS for kd in self.kinds], dtype=bool)

    @property
    def num_specials(self) -> int:
        return int(self.is_special.sum())

    def position_of(self, kind: str) -> int:
        return self.kinds.index(kind)


def _identifier_block(p, n: int, kind: str) -> np.ndarray:
    if p is None:
        return np.zeros((n, 0))
    P = p.P if isinstance(p, NodeIdentifiers) else np.asarray(p, dtype=np.float64)
    if P.shape[0] != n:
        raise ValueError(f"{kind} has {P.shape[0]} rows but the graph has {n} nodes")
    return P


def _type_block(e) -> np.ndarray:
    if e is None:
        return None
    return e.E if isinstance(e, TypeIdentifiers) else np.asarray(e, dtype=np.float64)


def tokenize_sparse(
    g: Graph,
    p: NodeIdentifiers | np.ndarray | None,
    e: TypeIdentifiers | np.ndarray | None,
    symmetrize: bool = False,
    per_token: np.ndarray | None = None,
) -> TokenSequence:
    """Node tokens ``[X_v, P_v, P_v, E^V]`` then edge tokens ``[X_uv, P_u, P_v, E^E]``.

    With ``symmetrize`` each edge also yields a reversed token ``(v, u)``.
    ``per_token`` replaces the concatenated node identifiers by one
    identifier per token, written into both identifier slots.
    """
    P = _identifier_block(p, g.n, "node identifier")
    E = _type_block(e)
    if E is not None and E.shape[0] < 2:
        raise ValueError("sparse tokenization needs two type identifier rows (node, edge)")
    d_p = P.shape[1] if per_token is None else per_token.shape[1]
    d_e = 0 if E is None else E.shape[1]
    cn, ce = g.feat_dim_node, g.feat_dim_edge
    C = cn + ce

    edge_list = [tuple(uv) for uv in g.edges.tolist()]
    edge_rows = list(range(g.m))
    if symmetrize:
        edge_list += [(v, u) for u, v in edge_list]
        edge_rows += list(range(g.m))
    num = g.n + len(edge_list)
    if per_token is not None and per_token.shape[0] != num:
        raise ValueError(f"per_token identifiers have {per_token.shape[0]} rows for {num} tokens")

    feats = np.zeros((num, C))
    feats[: g.n, :cn] = g.node_features
    if len(edge_list):
        feats[g.n :, cn:] = g.edge_features[edge_rows]
    if per_token is not None:
        ids = np.hstack([per_token, per_token])
    else:
        first = np.array([v for v in range(g.n)] + [u for u, _ in edge_list], dtype=np.int64)
        second = np.array([v for v in range(g.n)] + [v for _, v in edge_list], dtype=np.int64)
        ids = np.hstack([P[first], P[second]]) if num else np.zeros((0, 2 * d_p))
    type_index = np.array([0] * g.n + [1] * len(edge_list), dtype=np.int64)
    blocks = [feats, ids]
    if E is not None:
        blocks.append(E[type_index])
    return TokenSequence(
        channels=np.hstack(blocks),
        kinds=tuple(["node"] * g.n + ["edge"] * len(edge_list)),
        multi_indices=tuple([(v, v) for v in range(g.n)] + edge_list),
        type_index=type_index,
        n=g.n,
        k=2,
        C=C,
        d_p=d_p,
        d_e=d_e,
    )


def _dense_kind(cls: tuple) -> str:
    if max(cls) == 0:
        return "node"
    return "edge" if len(cls) == 2 else "hyperedge"


def tokenize_dense(
    x: np.ndarray,
    p: NodeIdentifiers | np.ndarray | None,
    e: TypeIdentifiers | np.ndarray | None,
    per_token: np.ndarray | None = None,
) -> TokenSequence:
    """One token per entry of an order-k tensor, in row-major multi-index order.

    Entry ``i`` becomes ``[X_i, P_{i_1}, ..., P_{i_k}, E^{class(i)}]``.
    """
    x = np.asarray(x, dtype=np.float64)
    k = x.ndim - 1
    if k < 1:
        raise ValueError("dense tokenization needs a tensor of order >= 1")
    n = x.shape[0]
    if any(s != n for s in x.shape[:-1]):
        raise ValueError(f"node axes {x.shape[:-1]} are not all equal")
    P = _identifier_block(p, n, "node identifier")
    E = _type_block(e)
    classes = enumerate_classes(k)
    if E is not None and E.shape[0] != len(classes):
        raise ValueError(f"need bell({k}) = {len(classes)} type identifier rows, got {E.shape[0]}")
    num = n**k
    multi = list(itertools.product(range(n), repeat=k))
    type_index = class_index_tensor(k, n).reshape(num).astype(np.int64)
    blocks = [x.reshape(num, x.shape[-1])]
    if per_token is not None:
        if per_token.shape[0] != num:
            raise ValueError(f"per_token identifiers have {per_token.shape[0]} rows for {num} tokens")
        blocks.append(np.hstack([per_token] * k))
        d_p = per_token.shape[1]
    else:
        idx = np.array(multi, dtype=np.int64).reshape(num, k)
        blocks.extend(P[idx[:, s]] for s in range(k))
        d_p = P.shape[1]
    if E is not None:
        blocks.append(E[type_index])
    return TokenSequence(
        channels=np.hstack(blocks),
        kinds=tuple(_dense_kind(classes[t]) for t in type_index),
        multi_indices=tuple(multi),
        type_index=type_index,
        n=n,
        k=k,
        C=x.shape[-1],
        d_p=d_p,
        d_e=0 if E is None else E.shape[1],
    )


def prepend_special(ts: TokenSequence, kind: str, embedding: np.ndarray | None = None) -> TokenSequence:
    if kind not in SPECIAL_KINDS:
        raise ValueError(f"special kind must be one of {SPECIAL_KINDS}, got {kind!r}")
    if kind in ts.kinds:
        raise ValueError(f"sequence already has a {kind} token")
    embeddings = dict(ts.special_embeddings)
    if embedding is not None:
        embeddings[kind] = np.asarray(embedding, dtype=np.float64)
    return replace(
        ts,
        channels=np.vstack([np.zeros((1, ts.channels.shape[1])), ts.channels]),
        kinds=(kind,) + ts.kinds,
        multi_indices=((),) + ts.multi_indices,
        type_index=np.concatenate([[-1], ts.type_index]),
        special_embeddings=embeddings,
    )


@dataclass
class InputProjection:
    w_in: np.ndarray
    specials: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.w_in.shape[1]


def project_input(ts: TokenSequence, proj: InputProjection) -> np.ndarray:
    """Z0: channels @ w_in for ordinary tokens, dedicated embeddings for specials."""
    if proj.w_in.shape[0] != ts.channels.shape[1]:
        raise ValueError(f"w_in has {proj.w_in.shape[0]} rows but tokens have {ts.channels.shape[1]} channels")
    z = ts.channels @ proj.w_in
    for pos, kind in enumerate(ts.kinds):
        if kind in SPECIAL_KINDS:
            emb = proj.specials.get(kind, ts.special_embeddings.get(kind))
            if emb is None:
                raise ValueError(f"no embedding for special token {kind!r}")
            if np.shape(emb) != (proj.d,):
                raise ValueError(f"embedding for {kind!r} must have width {proj.d}")
            z[pos] = emb
    return z


def token_class(ts: TokenSequence, pos: int) -> tuple:
    return class_of(ts.multi_indices[pos])

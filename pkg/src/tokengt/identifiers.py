"""Node identifiers (orthonormal per-node vectors) and type identifiers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equivariant import bell_number
from .graphs import Graph, normalized_laplacian
from .numerics import gaussian_matrix, make_rng, qr_orthonormal, sym_eig

__all__ = [
    "NODE_ID_KINDS",
    "NodeIdentifiers",
    "TypeIdentifiers",
    "orf_identifiers",
    "lap_identifiers",
    "exact_orthonormal_identifiers",
    "random_nonorthogonal_identifiers",
    "make_node_identifiers",
    "sign_flip_augment",
    "eigvec_dropout",
    "equispaced_type_identifiers",
    "random_type_identifiers",
]

# CLI spelling of the identifier kinds
NODE_ID_KINDS = ("orf", "lap", "exact", "random-nonorth")


@dataclass(frozen=True)
class NodeIdentifiers:
    P: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in NODE_ID_KINDS:
            raise ValueError(f"unknown node identifier kind {self.kind!r}; choose from {NODE_ID_KINDS}")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def d_p(self) -> int:
        return self.P.shape[1]

    def permuted(self, pi) -> "NodeIdentifiers":
        """Rows moved so that node ``i`` becomes node ``pi[i]``."""
        P = np.empty_like(self.P)
        P[np.asarray(pi)] = self.P
        return NodeIdentifiers(P, self.kind)


@dataclass(frozen=True)
class TypeIdentifiers:
    E: np.ndarray
    trainable: bool = True

    @property
    def d_e(self) -> int:
        return self.E.shape[1]


def _fit_width(q: np.ndarray, d_p: int, rng) -> np.ndarray:
    n = q.shape[1]
    if n < d_p:
        return np.hstack([q, np.zeros((q.shape[0], d_p - n))])
    if n > d_p:
        keep = np.sort(rng.choice(n, size=d_p, replace=False))
        return q[:, keep]
    return q


def orf_identifiers(n: int, d_p: int, seed) -> NodeIdentifiers:
    """Rows of a random orthogonal matrix (QR of an n x n Gaussian).

    Zero-padded when ``n < d_p``; when ``n > d_p`` a random subset of ``d_p``
    columns is kept and the rows are only nearly orthonormal.
    """
    if n < 1 or d_p < 1:
        raise ValueError("orf_identifiers needs n, d_p >= 1")
    rng = make_rng(seed)
    q = qr_orthonormal(gaussian_matrix(n, n, rng))
    return NodeIdentifiers(_fit_width(q, d_p, rng), "orf")


def lap_identifiers(g: Graph, d_p: int) -> NodeIdentifiers:
    """The ``d_p`` normalized-Laplacian eigenvectors with smallest eigenvalues."""
    if g.n == 0:
        return NodeIdentifiers(np.zeros((0, d_p)), "lap")
    _, u = sym_eig(normalized_laplacian(g))
    if u.shape[1] >= d_p:
        P = u[:, :d_p]
    else:
        P = np.hstack([u, np.zeros((g.n, d_p - u.shape[1]))])
    return NodeIdentifiers(P, "lap")


def exact_orthonormal_identifiers(n: int, d_p: int) -> NodeIdentifiers:
    if d_p < n:
        raise ValueError(f"exact identifiers need d_p >= n, got n={n}, d_p={d_p}")
    return NodeIdentifiers(np.eye(n, d_p), "exact")


def random_nonorthogonal_identifiers(n: int, d_p: int, seed) -> NodeIdentifiers:
    """Unit-norm Gaussian rows; the non-orthogonal ablation baseline."""
    P = gaussian_matrix(n, d_p, seed)
    return NodeIdentifiers(P / np.linalg.norm(P, axis=1, keepdims=True), "random-nonorth")


def make_node_identifiers(kind: str, n: int, d_p: int, seed=None, graph: Graph | None = None) -> NodeIdentifiers:
    if kind == "orf":
        return orf_identifiers(n, d_p, seed)
    if kind == "lap":
        if graph is None:
            raise ValueError("Laplacian identifiers need the graph")
        return lap_identifiers(graph, d_p)
    if kind == "exact":
        return exact_orthonormal_identifiers(n, d_p)
    if kind == "random-nonorth":
        return random_nonorthogonal_identifiers(n, d_p, seed)
    raise ValueError(f"unknown node identifier kind {kind!r}; choose from {NODE_ID_KINDS}")


def sign_flip_augment(p: NodeIdentifiers, seed) -> NodeIdentifiers:
    """Multiply every eigenvector (column) by an independent fair +-1."""
    if p.kind != "lap":
        raise ValueError("sign flips only apply to Laplacian identifiers")
    signs = make_rng(seed).choice([-1.0, 1.0], size=p.d_p)
    return NodeIdentifiers(p.P * signs[None, :], p.kind)


def eigvec_dropout(p: NodeIdentifiers, rate: float, seed) -> NodeIdentifiers:
    """Zero whole columns with probability ``rate``; rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return p
    keep = make_rng(seed).random(p.d_p) >= rate
    return NodeIdentifiers(p.P * (keep / (1.0 - rate))[None, :], p.kind)


def equispaced_type_identifiers(k: int, d_e: int) -> TypeIdentifiers:
    """bell(k) unit vectors spread evenly on a circle in the first two channels.

    Distinct rows have dot product at most cos(2 pi / bell(k)).
    """
    if d_e < 2:
        raise ValueError("equispaced type identifiers need d_e >= 2")
    b = bell_number(k)
    angles = 2.0 * np.pi * np.arange(b) / b
    E = np.zeros((b, d_e))
    E[:, 0] = np.cos(angles)
    E[:, 1] = np.sin(angles)
    return TypeIdentifiers(E, trainable=False)


def random_type_identifiers(num: int, d_e: int, seed, scale: float = 1.0) -> TypeIdentifiers:
    return TypeIdentifiers(scale * gaussian_matrix(num, d_e, seed) / np.sqrt(d_e), trainable=True)

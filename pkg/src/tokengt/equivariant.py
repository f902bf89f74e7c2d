"""Equivalence classes of multi-indices, basis tensors and equivariant layers.

An equivalence class of ``[n]^l`` is identified with the set partition of
the ``l`` index positions given by its equality pattern. Partitions are
written as restricted-growth strings (tuples): entry ``p[i]`` is the block
of position ``i`` and blocks are numbered in order of first appearance, so
``(3, 3, 5)`` has class ``(0, 0, 1)``.

Classes are always enumerated in lexicographic order of their strings; any
code that assigns heads or parameters to classes relies on that order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .numerics import make_rng

__all__ = [
    "MAX_ORDER",
    "DENSE_LIMIT",
    "SizeGuardError",
    "bell_number",
    "enumerate_classes",
    "class_of",
    "num_blocks",
    "split_class",
    "BasisTensor",
    "basis_tensor",
    "class_index_tensor",
    "EquivariantLayerParams",
    "random_layer_params",
    "equivariant_linear_apply",
    "invariant_apply",
    "ACTIVATIONS",
    "IGNSpec",
    "random_ign_spec",
    "ign_forward",
    "ign_spec_to_dict",
    "ign_spec_from_dict",
    "dumps_ign_spec",
    "loads_ign_spec",
]

MAX_ORDER = 8
DENSE_LIMIT = 10**6

EquivalenceClass = tuple


class SizeGuardError(ValueError):
    """Raised when a dense tensor would exceed ``DENSE_LIMIT`` entries."""


def bell_number(l: int) -> int:
    """Number of set partitions of ``l`` elements (Bell triangle)."""
    if l < 0 or l > MAX_ORDER:
        raise ValueError(f"bell_number supports 0 <= l <= {MAX_ORDER}, got {l}")
    row = [1]
    for _ in range(l):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


@lru_cache(maxsize=None)
def enumerate_classes(l: int) -> tuple:
    """All order-``l`` classes as restricted-growth strings, lexicographically."""
    if l < 0 or l > MAX_ORDER:
        raise ValueError(f"enumerate_classes supports 0 <= l <= {MAX_ORDER}, got {l}")
    if l == 0:
        return ((),)
    out = []

    def extend(prefix, top):
        if len(prefix) == l:
            out.append(tuple(prefix))
            return
        for b in range(top + 2):
            extend(prefix + [b], max(top, b))

    extend([0], 0)
    return tuple(out)


def class_of(multi_index: Sequence[int]) -> tuple:
    seen = {}
    return tuple(seen.setdefault(i, len(seen)) for i in multi_index)


def num_blocks(cls: Sequence[int]) -> int:
    return max(cls) + 1 if len(cls) else 0


def split_class(mu: Sequence[int], l: int) -> tuple[tuple, tuple]:
    """Classes of the first ``l`` positions and of the remaining positions of ``mu``."""
    return class_of(mu[:l]), class_of(mu[l:])


@lru_cache(maxsize=64)
def class_index_tensor(order: int, n: int) -> np.ndarray:
    """Integer array of shape ``(n,) * order``: index of each multi-index's class.

    Indices refer to positions in ``enumerate_classes(order)``.
    """
    if n**order > DENSE_LIMIT:
        raise SizeGuardError(f"n^order = {n}^{order} exceeds the dense limit {DENSE_LIMIT}")
    if order == 0:
        return np.zeros((), dtype=np.int64)
    grids = [g.ravel() for g in np.indices((n,) * order)]
    size = grids[0].size
    blocks = np.zeros((order, size), dtype=np.int64)
    top = np.zeros(size, dtype=np.int64)
    for p in range(1, order):
        assigned = np.full(size, -1, dtype=np.int64)
        for q in range(p - 1, -1, -1):
            same = grids[p] == grids[q]
            assigned = np.where(same, blocks[q], assigned)
        fresh = assigned < 0
        top = top + fresh
        blocks[p] = np.where(fresh, top, assigned)
    code = np.zeros(size, dtype=np.int64)
    for p in range(order):
        code = code * order + blocks[p]
    lookup = {}
    for idx, cls in enumerate(enumerate_classes(order)):
        c = 0
        for b in cls:
            c = c * order + b
        lookup[c] = idx
    table = np.full(int(order**order), -1, dtype=np.int64)
    for c, idx in lookup.items():
        table[c] = idx
    out = table[code].reshape((n,) * order)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BasisTensor:
    """Indicator tensor of one equivalence class over ``[n]^order``."""

    cls: tuple
    n: int

    @property
    def order(self) -> int:
        return len(self.cls)

    def contains(self, multi_index: Sequence[int]) -> bool:
        if len(multi_index) != self.order:
            raise ValueError(f"multi-index of length {len(multi_index)} for an order-{self.order} class")
        return class_of(multi_index) == tuple(self.cls)

    def __getitem__(self, multi_index) -> float:
        return 1.0 if self.contains(tuple(np.atleast_1d(multi_index).tolist())) else 0.0

    @property
    def materializable(self) -> bool:
        return self.n**self.order <= DENSE_LIMIT

    def materialize(self) -> np.ndarray:
        if not self.materializable:
            raise SizeGuardError(f"{self.n}^{self.order} entries exceed the dense limit {DENSE_LIMIT}")
        if num_blocks(self.cls) > self.n:
            return np.zeros((self.n,) * self.order)
        idx = enumerate_classes(self.order).index(tuple(self.cls))
        return (class_index_tensor(self.order, self.n) == idx).astype(np.float64)

    @property
    def dense(self) -> np.ndarray | None:
        return self.materialize() if self.materializable else None


def basis_tensor(cls: Sequence[int], n: int) -> BasisTensor:
    cls = tuple(int(c) for c in cls)
    if class_of(cls) != cls:
        raise ValueError(f"{cls} is not a restricted-growth string")
    return BasisTensor(cls, int(n))


# -- equivariant linear layers ---------------------------------------------------------


@dataclass
class EquivariantLayerParams:
    """Weights of L_{k->l}: one (d_in, d_out) matrix per order-(l+k) class and
    one d_out bias per order-l class, both keyed by restricted-growth string."""

    k: int
    l: int
    weights: dict
    biases: dict

    def __post_init__(self):
        wanted_w = set(enumerate_classes(self.l + self.k))
        wanted_b = set(enumerate_classes(self.l))
        if set(self.weights) != wanted_w:
            raise ValueError(f"expected {len(wanted_w)} weight entries (bell({self.l + self.k})), got {len(self.weights)}")
        if set(self.biases) != wanted_b:
            raise ValueError(f"expected {len(wanted_b)} bias entries (bell({self.l})), got {len(self.biases)}")
        self.weights = {c: np.atleast_2d(np.asarray(w, dtype=np.float64)) for c, w in self.weights.items()}
        self.biases = {c: np.atleast_1d(np.asarray(b, dtype=np.float64)) for c, b in self.biases.items()}
        shapes = {w.shape for w in self.weights.values()}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent weight shapes {shapes}")
        if any(b.shape != (self.d_out,) for b in self.biases.values()):
            raise ValueError("bias widths must equal the output width")

    @property
    def d_in(self) -> int:
        return next(iter(self.weights.values())).shape[0]

    @property
    def d_out(self) -> int:
        return next(iter(self.weights.values())).shape[1]

    def weight_list(self) -> list:
        return [self.weights[c] for c in enumerate_classes(self.l + self.k)]

    def bias_list(self) -> list:
        return [self.biases[c] for c in enumerate_classes(self.l)]

    @classmethod
    def zeros(cls, k, l, d_in, d_out):
        return cls(
            k,
            l,
            {c: np.zeros((d_in, d_out)) for c in enumerate_classes(l + k)},
            {c: np.zeros(d_out) for c in enumerate_classes(l)},
        )


def random_layer_params(k: int, l: int, d_in: int, d_out: int, seed, scale: float = 1.0, bias: bool = True):
    rng = make_rng(seed)
    weights = {c: scale * rng.standard_normal((d_in, d_out)) for c in enumerate_classes(l + k)}
    biases = {c: (scale * rng.standard_normal(d_out) if bias else np.zeros(d_out)) for c in enumerate_classes(l)}
    return EquivariantLayerParams(k, l, weights, biases)


def _check_input(p: EquivariantLayerParams, x: np.ndarray) -> int:
    x = np.asarray(x)
    if x.ndim != p.k + 1:
        raise ValueError(f"expected an order-{p.k} tensor (ndim {p.k + 1}), got ndim {x.ndim}")
    if x.shape[-1] != p.d_in:
        raise ValueError(f"input has {x.shape[-1]} channels, layer expects {p.d_in}")
    n = x.shape[0] if p.k else 0
    if any(s != n for s in x.shape[:-1]):
        raise ValueError(f"node axes {x.shape[:-1]} are not all equal")
    return n


def equivariant_linear_apply(p: EquivariantLayerParams, x: np.ndarray) -> np.ndarray:
    """L_{k->l}(X)_i = sum_mu sum_j B^mu_{i,j} X_j w_mu + sum_lam C^lam_i b_lam.

    Pairs (i, j) are grouped by their joint class; returns an array of shape
    ``(n,) * l + (d_out,)``.
    """
    n = _check_input(p, x)
    k, l = p.k, p.l
    xk = np.asarray(x, dtype=np.float64).reshape(n**k, p.d_in)
    joint = class_index_tensor(l + k, n).reshape(n**l, n**k)
    out = np.zeros((n**l, p.d_out))
    for idx, w in enumerate(p.weight_list()):
        mask = joint == idx
        if mask.any():
            out += (mask.astype(np.float64) @ xk) @ w
    query = class_index_tensor(l, n).reshape(n**l)
    out += np.stack(p.bias_list())[query]
    return out.reshape((n,) * l + (p.d_out,))


def invariant_apply(p: EquivariantLayerParams, x: np.ndarray) -> np.ndarray:
    if p.l != 0:
        raise ValueError("invariant_apply needs a layer with output order 0")
    return equivariant_linear_apply(p, x)


# -- invariant graph networks ----------------------------------------------------------

ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda z: np.maximum(z, 0.0),
    "identity": lambda z: z,
    "tanh": np.tanh,
}


@dataclass
class IGNSpec:
    """MLP o L_{k->0} o L^(T) o sigma o ... o sigma o L^(1).

    ``mlp`` is a list of ``(W, b)`` affine maps; the activation is applied
    between them but not after the last one.
    """

    k: int
    layers: list
    head: EquivariantLayerParams
    mlp: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        width = None
        for t, layer in enumerate(self.layers):
            if layer.k != self.k or layer.l != self.k:
                raise ValueError(f"layer {t} must map order {self.k} to order {self.k}")
            if width is not None and layer.d_in != width:
                raise ValueError(f"layer {t} input width {layer.d_in} != previous width {width}")
            width = layer.d_out
        if self.head.k != self.k or self.head.l != 0:
            raise ValueError("head must be an invariant layer of the same order")
        if width is not None and self.head.d_in != width:
            raise ValueError(f"head input width {self.head.d_in} != last layer width {width}")
        self.mlp = [(np.atleast_2d(np.asarray(w, float)), np.atleast_1d(np.asarray(b, float))) for w, b in self.mlp]
        width = self.head.d_out
        for w, b in self.mlp:
            if w.shape[0] != width or b.shape != (w.shape[1],):
                raise ValueError("output MLP widths do not chain")
            width = w.shape[1]

    @property
    def sigma(self):
        return ACTIVATIONS[self.activation]

    @property
    def widths(self) -> list:
        if self.layers:
            return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]
        return [self.head.d_in]


def random_ign_spec(k: int, widths: Sequence[int], head_width: int, mlp_widths: Sequence[int], seed, scale=0.5, activation="relu"):
    """Random k-IGN with equivariant widths ``widths`` (d_0, ..., d_T)."""
    rng = make_rng(seed)
    layers = [random_layer_params(k, k, a, b, rng, scale) for a, b in zip(widths[:-1], widths[1:])]
    head = random_layer_params(k, 0, widths[-1], head_width, rng, scale)
    mlp = []
    prev = head_width
    for w in mlp_widths:
        mlp.append((scale * rng.standard_normal((prev, w)), scale * rng.standard_normal(w)))
        prev = w
    return IGNSpec(k, layers, head, mlp, activation)


def _apply_mlp(spec: IGNSpec, z: np.ndarray) -> np.ndarray:
    for t, (w, b) in enumerate(spec.mlp):
        z = z @ w + b
        if t < len(spec.mlp) - 1:
            z = spec.sigma(z)
    return z


def ign_forward(spec: IGNSpec, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for t, layer in enumerate(spec.layers):
        h = equivariant_linear_apply(layer, h)
        if t < len(spec.layers) - 1:
            h = spec.sigma(h)
    return _apply_mlp(spec, invariant_apply(spec.head, h))


# -- serialisation ---------------------------------------------------------------------


def _key(cls) -> str:
    return "".join(str(c) for c in cls)


def _unkey(s: str) -> tuple:
    return tuple(int(c) for c in s)


def _layer_to_dict(p: EquivariantLayerParams) -> dict:
    return {
        "k": p.k,
        "l": p.l,
        "weights": {_key(c): p.weights[c].tolist() for c in enumerate_classes(p.l + p.k)},
        "biases": {_key(c): p.biases[c].tolist() for c in enumerate_classes(p.l)},
    }


def _layer_from_dict(d: dict) -> EquivariantLayerParams:
    return EquivariantLayerParams(
        d["k"],
        d["l"],
        {_unkey(c): np.array(w) for c, w in d["weights"].items()},
        {_unkey(c): np.array(b) for c, b in d["biases"].items()},
    )


def ign_spec_to_dict(spec: IGNSpec) -> dict:
    return {
        "format": "ign-spec/1",
        "k": spec.k,
        "activation": spec.activation,
        "widths": spec.widths,
        "layers": [_layer_to_dict(p) for p in spec.layers],
        "head": _layer_to_dict(spec.head),
        "mlp": [{"W": w.tolist(), "b": b.tolist()} for w, b in spec.mlp],
    }


def ign_spec_from_dict(d: dict) -> IGNSpec:
    return IGNSpec(
        d["k"],
        [_layer_from_dict(p) for p in d["layers"]],
        _layer_from_dict(d["head"]),
        [(np.array(m["W"]), np.array(m["b"])) for m in d["mlp"]],
        d.get("activation", "relu"),
    )


def dumps_ign_spec(spec: IGNSpec) -> str:
    return json.dumps(ign_spec_to_dict(spec), indent=1)


def loads_ign_spec(text: str) -> IGNSpec:
    return ign_spec_from_dict(json.loads(text))

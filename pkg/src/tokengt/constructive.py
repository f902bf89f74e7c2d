"""Explicit Transformer parameters that reproduce equivariant basis tensors,
equivariant linear layers and whole invariant graph networks, plus checks
against the brute-force equivariant oracles.

Channel layout of a constructed token (width ``d_T``)::

    [ features (d) | P_{i_1} ... P_{i_k} (k d_p) | E^{class(i)} (d_e) | bell(2k) reserved blocks of width d ]

``D = d + k d_p + d_e`` marks the start of the reserved blocks.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .attention import MSAParams, TransformerLayerParams, attention_logits, msa_forward, transformer_layer_forward
from .equivariant import (
    ACTIVATIONS,
    EquivariantLayerParams,
    IGNSpec,
    _apply_mlp,
    basis_tensor,
    bell_number,
    class_index_tensor,
    class_of,
    enumerate_classes,
    equivariant_linear_apply,
    ign_forward,
    num_blocks,
    split_class,
)
from .graphs import Graph, barabasi_albert
from .identifiers import (
    NodeIdentifiers,
    equispaced_type_identifiers,
    exact_orthonormal_identifiers,
    lap_identifiers,
    orf_identifiers,
)
from .tokenizer import tokenize_dense

__all__ = [
    "MAX_SHARPNESS",
    "ConstructiveConfig",
    "DenormalizerContext",
    "VerificationResult",
    "ConstructedIGN",
    "sign_of",
    "score",
    "type_epsilon",
    "build_qk_params",
    "build_msa",
    "completion_count",
    "completion_count_bruteforce",
    "denormalizer_context",
    "build_layer_for_equivariant",
    "build_ign_transformer",
    "constructed_logits",
    "verify_lemma1",
    "verify_theorem2",
    "verify_theorem3",
]

MAX_SHARPNESS = 1e8


@dataclass
class ConstructiveConfig:
    k: int
    d_p: int
    d_e: int = 2
    a: float = 1e3
    classes: tuple | None = None

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"sharpness a must be a positive finite number, got {self.a}")
        if self.a > MAX_SHARPNESS:
            raise ValueError(f"sharpness a={self.a:g} exceeds {MAX_SHARPNESS:g}; exp would saturate")
        if self.k < 1:
            raise ValueError("order k must be >= 1")
        if self.d_p < 1:
            raise ValueError("d_p must be >= 1")
        if self.d_e < 2:
            raise ValueError("constructive type identifiers need d_e >= 2")
        if self.classes is None:
            self.classes = enumerate_classes(2 * self.k)
        else:
            self.classes = tuple(tuple(c) for c in self.classes)
            for c in self.classes:
                if len(c) != 2 * self.k or class_of(c) != c:
                    raise ValueError(f"{c} is not an order-{2 * self.k} class")

    @property
    def d_H(self) -> int:
        return self.k * self.k * self.d_p + 2 * self.d_e

    @property
    def eps(self) -> float:
        return type_epsilon(self.k)

    @property
    def type_ids(self) -> np.ndarray:
        return equispaced_type_identifiers(self.k, self.d_e).E

    def D(self, d: int) -> int:
        return d + self.k * self.d_p + self.d_e

    def d_T(self, d: int) -> int:
        return self.D(d) + bell_number(2 * self.k) * d


def type_epsilon(k: int) -> float:
    return 1.0 - math.cos(2.0 * math.pi / bell_number(k))


# -- scoring ---------------------------------------------------------------------------


def sign_of(pos_a: int, pos_b: int, mu: Sequence[int], l: int | None = None) -> int:
    """+1 iff ``mu`` puts query position ``pos_a`` and key position ``pos_b`` in one block.

    Positions are 1-based; ``l`` is the query order (default: half of ``mu``).
    """
    l = len(mu) // 2 if l is None else l
    k = len(mu) - l
    if not (1 <= pos_a <= l and 1 <= pos_b <= k):
        raise ValueError(f"positions ({pos_a}, {pos_b}) out of range for l={l}, k={k}")
    return 1 if mu[pos_a - 1] == mu[l + pos_b - 1] else -1


def score(i: Sequence[int], j: Sequence[int], mu: Sequence[int], eps: float) -> float:
    l = len(i)
    if l + len(j) != len(mu):
        raise ValueError("multi-index orders do not match the class")
    gq, gk = split_class(mu, l)
    total = (1.0 if class_of(i) == gq else 1.0 - eps) + (1.0 if class_of(j) == gk else 1.0 - eps)
    for a in range(l):
        for b in range(len(j)):
            if i[a] == j[b]:
                total += sign_of(a + 1, b + 1, mu, l)
    return total


# -- attention construction ------------------------------------------------------------


def build_qk_params(cfg: ConstructiveConfig, mu: Sequence[int], d: int, d_T: int | None = None):
    """Query/key weights and biases of one head targeting class ``mu``.

    Returns ``(w_q, w_k, b_q, b_k)`` with shapes ``(d_T, d_H)`` and ``(d_H,)``.
    """
    k, d_p, d_e = cfg.k, cfg.d_p, cfg.d_e
    d_T = cfg.d_T(d) if d_T is None else d_T
    if d_T < cfg.D(d):
        raise ValueError(f"token width {d_T} cannot hold the {cfg.D(d)} layout channels")
    mu = tuple(mu)
    if len(mu) != 2 * k:
        raise ValueError(f"class {mu} does not have order {2 * k}")
    root = math.sqrt(cfg.a)
    d_H = cfg.d_H
    w_q = np.zeros((d_T, d_H))
    w_k = np.zeros((d_T, d_H))
    eye = root * np.eye(d_p)
    for s in range(k):
        for r in range(k):
            col = (s * k + r) * d_p
            q_row = d + s * d_p
            k_row = d + r * d_p
            w_q[q_row : q_row + d_p, col : col + d_p] = sign_of(s + 1, r + 1, mu, k) * eye
            w_k[k_row : k_row + d_p, col : col + d_p] = eye
    t_row, t_col = d + k * d_p, k * k * d_p
    w_q[t_row : t_row + d_e, t_col : t_col + d_e] = root * np.eye(d_e)
    w_k[t_row : t_row + d_e, t_col + d_e : t_col + 2 * d_e] = root * np.eye(d_e)
    classes_k = enumerate_classes(k)
    g_q, g_k = split_class(mu, k)
    E = cfg.type_ids
    b_q = np.zeros(d_H)
    b_k = np.zeros(d_H)
    b_q[t_col + d_e :] = root * E[classes_k.index(g_k)]
    b_k[t_col : t_col + d_e] = root * E[classes_k.index(g_q)]
    return w_q, w_k, b_q, b_k


def build_msa(cfg: ConstructiveConfig, d: int, d_T: int | None = None, value_out: list | None = None) -> MSAParams:
    """One head per class in ``cfg.classes``.

    ``value_out`` optionally gives each head's ``(w_v, w_o)``; by default the
    value path is zero.
    """
    d_T = cfg.d_T(d) if d_T is None else d_T
    parts = [build_qk_params(cfg, mu, d, d_T) for mu in cfg.classes]
    H = len(parts)
    if value_out is None:
        w_v = np.zeros((H, d_T, 1))
        w_o = np.zeros((H, 1, d_T))
    else:
        w_v = np.stack([v for v, _ in value_out])
        w_o = np.stack([o for _, o in value_out])
    return MSAParams(
        w_q=np.stack([p[0] for p in parts]),
        b_q=np.stack([p[2] for p in parts]),
        w_k=np.stack([p[1] for p in parts]),
        b_k=np.stack([p[3] for p in parts]),
        w_v=w_v,
        w_o=w_o,
    )


def _node_ids(kind, n: int, d_p: int, seed=0) -> np.ndarray:
    if isinstance(kind, NodeIdentifiers):
        return kind.P
    if isinstance(kind, np.ndarray):
        return kind
    if d_p < n:
        raise ValueError(f"constructive mode needs d_p >= n, got d_p={d_p}, n={n}")
    if kind == "exact":
        return exact_orthonormal_identifiers(n, d_p).P
    if kind == "orf":
        return orf_identifiers(n, d_p, seed).P
    if kind == "lap":
        g = barabasi_albert(n, 2, seed) if n > 2 else Graph(n, [(0, 1)] if n == 2 else [])
        return lap_identifiers(g, d_p).P
    raise ValueError(f"unsupported identifier kind {kind!r} for constructive mode")


def _tokens(x: np.ndarray, cfg: ConstructiveConfig, P: np.ndarray, d: int, d_T: int) -> np.ndarray:
    """X' = X^in w_in with w_in a selector into the constructed layout."""
    ts = tokenize_dense(x, P, cfg.type_ids)
    c = ts.C
    if c > d:
        raise ValueError(f"input has {c} channels but the layout reserves {d}")
    z = np.zeros((len(ts), d_T))
    z[:, :c] = ts.channels[:, :c]
    z[:, d : cfg.D(d)] = ts.channels[:, c:]
    return z


def constructed_logits(n: int, cfg: ConstructiveConfig, identifiers="exact", d: int = 1) -> np.ndarray:
    """Logits (H, n^k, n^k) of the constructed heads on zero-feature tokens."""
    P = _node_ids(identifiers, n, cfg.d_p)
    x = np.zeros((n,) * cfg.k + (d,))
    z = _tokens(x, cfg, P, d, cfg.D(d))
    return attention_logits(z, build_msa(cfg, d, cfg.D(d)))[2]


def _normalized_basis(mu, n: int):
    k = len(mu) // 2
    b = basis_tensor(mu, n).materialize().reshape(n**k, n**k)
    rows = b.sum(axis=1)
    target = np.divide(b, rows[:, None], out=np.zeros_like(b), where=rows[:, None] > 0)
    return target, rows > 0


# -- denormalisation -------------------------------------------------------------------


def completion_count(query_cls: Sequence[int], mu: Sequence[int], n: int) -> int:
    """Number of key multi-indices j with (i, j) in ``mu`` for any i of class ``query_cls``."""
    k = len(query_cls)
    if split_class(mu, k)[0] != tuple(query_cls):
        return 0
    q = num_blocks(query_cls)
    if q > n:
        return 0
    fixed = set(mu[:k])
    free = len({b for b in mu[k:] if b not in fixed})
    count = 1
    for s in range(free):
        count *= max(n - q - s, 0)
    return count


def completion_count_bruteforce(query_cls: Sequence[int], mu: Sequence[int], n: int) -> int:
    k = len(query_cls)
    if num_blocks(query_cls) > n:
        return 0
    i = tuple(query_cls)
    mu = tuple(mu)
    return sum(1 for j in itertools.product(range(n), repeat=len(mu) - k) if class_of(i + j) == mu)


@dataclass
class DenormalizerContext:
    """Per-query-class tables used by the closed-form tokenwise MLP.

    ``g[c, h]`` is the row sum of head ``h``'s basis tensor for queries of
    class ``c``; zero rows silence heads that have no matching key.
    """

    n: int
    k: int
    heads: tuple
    g: np.ndarray
    biases: np.ndarray
    weights: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.biases.shape[1]


def denormalizer_context(p: EquivariantLayerParams, n: int, cross_check: bool = True) -> DenormalizerContext:
    if p.k != p.l:
        raise ValueError("denormalisation is defined for order-preserving layers")
    k = p.k
    heads = enumerate_classes(2 * k)
    queries = enumerate_classes(k)
    g = np.array([[completion_count(c, mu, n) for mu in heads] for c in queries], dtype=np.int64)
    if cross_check and n <= 5:
        brute = np.array([[completion_count_bruteforce(c, mu, n) for mu in heads] for c in queries])
        if not np.array_equal(g, brute):
            raise AssertionError("combinatorial row sums disagree with brute-force enumeration")
    return DenormalizerContext(n, k, heads, g, np.stack(p.bias_list()), p.weight_list())


def _pad(m: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols))
    out[: m.shape[0], : m.shape[1]] = m
    return out


def _pad_layer(p: EquivariantLayerParams, width: int) -> EquivariantLayerParams:
    return EquivariantLayerParams(
        p.k,
        p.l,
        {c: _pad(w, width, width) for c, w in p.weights.items()},
        {c: _pad(b[None], 1, width)[0] for c, b in p.biases.items()},
    )


def _classify(h: np.ndarray, cfg: ConstructiveConfig, d: int) -> np.ndarray:
    # nearest type identifier by dot product
    D = cfg.D(d)
    return np.argmax(h[:, D - cfg.d_e : D] @ cfg.type_ids.T, axis=1)


def _make_exact_mlp(ctx: DenormalizerContext, cfg: ConstructiveConfig, d: int, mode: str, sigma=None):
    D = cfg.D(d)
    H = len(ctx.heads)
    sigma = ACTIVATIONS["identity"] if sigma is None else sigma

    def combined(h):
        cls = _classify(h, cfg, d)
        reserved = h[:, D : D + H * d].reshape(len(h), H, d)
        return cls, np.einsum("nh,nhd->nd", ctx.g[cls].astype(h.dtype), reserved) + ctx.biases[cls]

    def f(h):
        cls, F = combined(h)
        out = np.zeros_like(h)
        out[:, :d] = -h[:, :d] + sigma(F)
        out[:, D:] = -h[:, D:]
        return out

    def f_last(h):
        # write F into the reserved block of the token's own class, clear the rest
        cls, F = combined(h)
        out = -h
        rows = np.arange(len(h))
        for c in range(d):
            out[rows, D + cls * d + c] += F[:, c]
        return out

    return f if mode == "layer" else f_last


def build_layer_for_equivariant(
    p: EquivariantLayerParams, cfg: ConstructiveConfig, n: int, d: int | None = None, sigma=None, last: bool = False
):
    """Transformer layer whose first ``d`` output channels approximate ``L_{k->k}``.

    Returns ``(layer, w_out)``. ``sigma`` is folded into the tokenwise map;
    with ``last`` the result is instead copied into class-gated blocks.
    """
    if p.k != cfg.k or p.l != cfg.k:
        raise ValueError(f"layer must map order {cfg.k} to order {cfg.k}")
    d = max(p.d_in, p.d_out) if d is None else d
    if d < max(p.d_in, p.d_out):
        raise ValueError("layout width is smaller than the layer widths")
    if len(cfg.classes) != bell_number(2 * cfg.k) or tuple(cfg.classes) != enumerate_classes(2 * cfg.k):
        raise ValueError(f"a full layer needs all bell({2 * cfg.k}) heads in canonical order")
    if n > cfg.d_p:
        raise ValueError(f"exact identifiers need d_p >= n, got d_p={cfg.d_p}, n={n}")
    padded = _pad_layer(p, d)
    d_T = cfg.d_T(d)
    D = cfg.D(d)
    value_out = []
    for h, mu in enumerate(cfg.classes):
        w_v = np.zeros((d_T, d))
        w_v[:d, :d] = np.eye(d)
        w_o = np.zeros((d, d_T))
        w_o[:, D + h * d : D + (h + 1) * d] = padded.weights[mu]
        value_out.append((w_v, w_o))
    msa = build_msa(cfg, d, d_T, value_out)
    ctx = denormalizer_context(padded, n)
    exact = _make_exact_mlp(ctx, cfg, d, "last" if last else "layer", sigma)
    w_out = np.zeros((d_T, d))
    w_out[:d, :d] = np.eye(d)
    return TransformerLayerParams(msa, exact_mlp=exact, norm_mode="none"), w_out


@dataclass
class ConstructedIGN:
    """Stacked constructed layers, sum pooling and the closed-form readout."""

    cfg: ConstructiveConfig
    spec: IGNSpec
    n: int
    d: int
    layers: list

    def tokens(self, x: np.ndarray, identifiers="exact") -> np.ndarray:
        P = _node_ids(identifiers, self.n, self.cfg.d_p)
        return _tokens(x, self.cfg, P, self.d, self.cfg.d_T(self.d))

    def pooled(self, x: np.ndarray, identifiers="exact") -> np.ndarray:
        z = self.tokens(x, identifiers)
        for layer in self.layers:
            z = transformer_layer_forward(z, layer)
        if not self.layers:
            # no layer to duplicate into class blocks: gate the raw features directly
            cls = _classify(z, self.cfg, self.d)
            D = self.cfg.D(self.d)
            gated = np.zeros_like(z)
            for c in range(self.d):
                gated[np.arange(len(z)), D + cls * self.d + c] = z[:, c]
            z = gated
        return z.sum(axis=0)

    def readout(self, pooled: np.ndarray) -> np.ndarray:
        D = self.cfg.D(self.d)
        head = self.spec.head
        acc = head.biases[()].copy()
        for a, cls in enumerate(enumerate_classes(self.cfg.k)):
            chunk = pooled[D + a * self.d : D + (a + 1) * self.d][: head.d_in]
            acc = acc + chunk @ head.weights[cls]
        return _apply_mlp(self.spec, acc)

    def __call__(self, x: np.ndarray, identifiers="exact") -> np.ndarray:
        return self.readout(self.pooled(x, identifiers))


def build_ign_transformer(spec: IGNSpec, cfg: ConstructiveConfig, n: int) -> ConstructedIGN:
    if spec.k != cfg.k:
        raise ValueError(f"spec has order {spec.k} but the config has order {cfg.k}")
    d = max(spec.widths)
    layers = []
    T = len(spec.layers)
    for t, p in enumerate(spec.layers):
        last = t == T - 1
        layer, _ = build_layer_for_equivariant(p, cfg, n, d, sigma=None if last else spec.sigma, last=last)
        layers.append(layer)
    return ConstructedIGN(cfg, spec, n, d, layers)


# -- verification ----------------------------------------------------------------------


class VerificationResult(NamedTuple):
    error: float | np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.asarray(self.error) <= self.tol))

    @property
    def max_error(self) -> float:
        return float(np.max(self.error))


def verify_lemma1(n: int, k: int, mu=None, a: float = 1e3, identifiers="exact", tol: float = 1e-6, d_e: int = 2) -> VerificationResult:
    """Max |alpha^h - normalised B^mu| over rows with a non-empty basis row.

    ``mu`` may be one class, a list of classes, or None for all bell(2k).
    All requested heads share one set of identifiers.
    """
    if mu is None:
        classes = enumerate_classes(2 * k)
    elif len(mu) and isinstance(mu[0], (tuple, list)):
        classes = tuple(tuple(m) for m in mu)
    else:
        classes = (tuple(mu),)
    d_p = identifiers.d_p if isinstance(identifiers, NodeIdentifiers) else n
    cfg = ConstructiveConfig(k, d_p, d_e, a, classes)
    logits = constructed_logits(n, cfg, identifiers)
    attn = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn /= attn.sum(axis=-1, keepdims=True)
    worst = 0.0
    for h, cls in enumerate(classes):
        target, rows = _normalized_basis(cls, n)
        if rows.any():
            worst = max(worst, float(np.abs(attn[h][rows] - target[rows]).max()))
    return VerificationResult(worst, tol)


def verify_theorem2(x: np.ndarray, p: EquivariantLayerParams, cfg: ConstructiveConfig, tol: float | None = None, identifiers="exact") -> VerificationResult:
    """Max |T(X') w_out - L(X)|; default tolerance 1e-4 (1 + |oracle|_inf)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    oracle = equivariant_linear_apply(p, x)
    layer, w_out = build_layer_for_equivariant(p, cfg, n)
    d = w_out.shape[1]
    P = _node_ids(identifiers, n, cfg.d_p)
    z = _tokens(x, cfg, P, d, cfg.d_T(d))
    out = (transformer_layer_forward(z, layer) @ w_out)[:, : p.d_out]
    tol = 1e-4 * (1.0 + float(np.abs(oracle).max())) if tol is None else tol
    return VerificationResult(float(np.abs(out - oracle.reshape(out.shape)).max()), tol)


def verify_theorem3(x: np.ndarray, spec: IGNSpec, cfg: ConstructiveConfig, tol: float = 1e-3, identifiers="exact") -> VerificationResult:
    """Per-output-channel |pipeline(x) - ign_forward(spec, x)|."""
    x = np.asarray(x, dtype=np.float64)
    model = build_ign_transformer(spec, cfg, x.shape[0])
    return VerificationResult(np.abs(model(x, identifiers) - ign_forward(spec, x)), tol)

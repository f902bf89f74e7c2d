"""Multihead self-attention, Transformer layers, kernelized attention and
attention-distance analysis.

Head parameters are stored stacked along a leading head axis, e.g. ``w_q``
has shape ``(H, d, d_H)``. Query and key projections carry biases; value
and output projections do not.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graphs import UNREACHABLE
from .numerics import make_rng, qr_orthonormal, softmax_rows

__all__ = [
    "MSAParams",
    "MLPParams",
    "TransformerLayerParams",
    "KernelAttentionConfig",
    "random_msa_params",
    "random_layer",
    "attention_logits",
    "msa_forward",
    "msa_backward",
    "attention_score_gradients",
    "gelu",
    "layer_norm",
    "transformer_layer_forward",
    "transformer_layer_backward",
    "exact_attention",
    "favor_features",
    "favor_attention",
    "attention_distance",
    "write_attention_csv",
]


@dataclass
class MSAParams:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        H, d, d_H = self.w_q.shape
        if self.w_k.shape != (H, d, d_H) or self.b_q.shape != (H, d_H) or self.b_k.shape != (H, d_H):
            raise ValueError("query/key shapes are inconsistent")
        if self.w_v.shape[:2] != (H, d) or self.w_o.shape != (H, self.w_v.shape[2], d):
            raise ValueError("value/output shapes are inconsistent")

    @property
    def H(self) -> int:
        return self.w_q.shape[0]

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_H(self) -> int:
        return self.w_q.shape[2]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[2]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "w_o")}


@dataclass
class MLPParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class TransformerLayerParams:
    """One encoder layer: H = X + MSA(X), out = H + MLP(H).

    With ``norm_mode="pre"`` the MSA and MLP see layer-normalised inputs.
    ``exact_mlp`` replaces the learned MLP by a closed-form tokenwise map.
    """

    msa: MSAParams
    mlp: MLPParams | None = None
    exact_mlp: Callable[[np.ndarray], np.ndarray] | None = None
    norm_mode: str = "none"
    ln: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.mlp is None) == (self.exact_mlp is None):
            raise ValueError("exactly one of mlp / exact_mlp must be set")
        if self.norm_mode not in ("none", "pre"):
            raise ValueError(f"norm_mode must be 'none' or 'pre', got {self.norm_mode!r}")
        if self.norm_mode == "pre" and not self.ln:
            d = self.msa.d
            self.ln = {"g1": np.ones(d), "b1": np.zeros(d), "g2": np.ones(d), "b2": np.zeros(d)}


@dataclass
class KernelAttentionConfig:
    num_features: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_features < 1:
            raise ValueError("num_features must be >= 1")


def random_msa_params(H, d, d_H, d_v, seed, scale=None, dtype=np.float64) -> MSAParams:
    rng = make_rng(seed)
    s = 1.0 / np.sqrt(d) if scale is None else scale
    return MSAParams(
        w_q=(s * rng.standard_normal((H, d, d_H))).astype(dtype),
        b_q=np.zeros((H, d_H), dtype),
        w_k=(s * rng.standard_normal((H, d, d_H))).astype(dtype),
        b_k=np.zeros((H, d_H), dtype),
        w_v=(s * rng.standard_normal((H, d, d_v))).astype(dtype),
        w_o=(rng.standard_normal((H, d_v, d)) / np.sqrt(H * d_v)).astype(dtype),
    )


def random_layer(H, d, d_H, d_F, seed, norm_mode="pre") -> TransformerLayerParams:
    rng = make_rng(seed)
    msa = random_msa_params(H, d, d_H, d_H, rng)
    mlp = MLPParams(
        w1=rng.standard_normal((d, d_F)) / np.sqrt(d),
        b1=np.zeros(d_F),
        w2=rng.standard_normal((d_F, d)) / np.sqrt(d_F),
        b2=np.zeros(d),
    )
    return TransformerLayerParams(msa, mlp=mlp, norm_mode=norm_mode)


# -- multihead self-attention ----------------------------------------------------------


def _check_x(x: np.ndarray, p: MSAParams):
    if x.ndim < 2 or x.shape[-1] != p.d:
        raise ValueError(f"expected tokens of shape (..., N, {p.d}), got {x.shape}")


def _proj(x, w):
    # (..., N, d) x (H, d, e) -> (..., H, N, e)
    return np.swapaxes(np.tensordot(x, w, axes=([-1], [1])), -2, -3)


def _weight_grad(x_, d):
    # sum_b X_b^T D_bh: (B, N, a) x (B, H, N, e) -> (H, a, e), as one matmul per head
    B, H, N, e = d.shape
    return np.swapaxes(x_.reshape(B * N, -1), 0, 1) @ np.swapaxes(d, 0, 1).reshape(H, B * N, e)


def _merge_heads(d, w):
    # sum_h D_h W_h^T: (..., H, N, e) x (H, a, e) -> (..., N, a)
    H, a, e = w.shape
    stacked = np.swapaxes(d, -2, -3).reshape(d.shape[:-3] + (d.shape[-2], H * e))
    return stacked @ np.swapaxes(w, 1, 2).reshape(H * e, a)


def attention_logits(x: np.ndarray, p: MSAParams, key_mask: np.ndarray | None = None):
    """Per-head queries, keys and scaled logits (..., H, N, N).

    Keys where ``key_mask`` (shape (..., N)) is False get logit -inf.
    """
    _check_x(x, p)
    q = _proj(x, p.w_q) + p.b_q[:, None, :]
    k = _proj(x, p.w_k) + p.b_k[:, None, :]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(p.d_H)
    if key_mask is not None:
        logits = np.where(key_mask[..., None, None, :], logits, -np.inf)
    return q, k, logits


def msa_forward(x: np.ndarray, p: MSAParams, return_cache: bool = False, key_mask: np.ndarray | None = None):
    """MSA(X)_i = sum_h sum_j alpha^h_ij X_j w^V_h w^O_h.

    Returns ``(out, attn)`` where ``attn`` has shape (..., H, N, N).
    """
    q, k, logits = attention_logits(x, p, key_mask)
    attn = softmax_rows(logits)
    v = _proj(x, p.w_v)
    heads = attn @ v
    out = _merge_heads(heads, np.swapaxes(p.w_o, 1, 2))
    if return_cache:
        return out, attn, {"q": q, "k": k, "v": v, "heads": heads}
    return out, attn


def _batched(*arrays, core: int):
    # view every array with exactly one leading batch axis
    return [a.reshape((-1,) + a.shape[a.ndim - core :]) for a in arrays]


def _score_backward(x, p, attn, q, k, upstream):
    lead = x.shape[:-2]
    x_, attn_, q_, k_, up_ = _batched(x, core=2) + _batched(attn, q, k, upstream, core=3)
    # softmax Jacobian per row: diag(a) - a a^T
    ds = attn_ * (up_ - np.sum(up_ * attn_, axis=-1, keepdims=True))
    ds = ds / np.sqrt(p.d_H)
    dq = ds @ k_
    dk = np.swapaxes(ds, -1, -2) @ q_
    grads = {
        "w_q": _weight_grad(x_, dq),
        "b_q": dq.sum(axis=(0, 2)),
        "w_k": _weight_grad(x_, dk),
        "b_k": dk.sum(axis=(0, 2)),
    }
    dx = _merge_heads(dq, p.w_q) + _merge_heads(dk, p.w_k)
    return grads, dx.reshape(lead + dx.shape[1:])


def attention_score_gradients(x: np.ndarray, p: MSAParams, upstream: np.ndarray) -> dict:
    """Reverse pass from dLoss/dalpha (H, N, N) to the query/key parameters and X.

    Returns a dict with ``w_q, b_q, w_k, b_k`` (stacked per head) and ``x``.
    """
    q, k, logits = attention_logits(x, p)
    if upstream.shape != logits.shape:
        raise ValueError(f"upstream has shape {upstream.shape}, expected {logits.shape}")
    attn = softmax_rows(logits)
    grads, dx = _score_backward(x, p, attn, q, k, upstream)
    grads["x"] = dx
    return grads


def msa_backward(x, p: MSAParams, attn, cache, grad_out, grad_attn=None) -> dict:
    """Gradients of a scalar loss through :func:`msa_forward`.

    ``grad_attn`` optionally adds a direct dLoss/dalpha term.
    """
    v, heads = cache["v"], cache["heads"]
    lead = x.shape[:-2]
    x_, g_ = _batched(x, grad_out, core=2)
    v_, heads_, attn_ = _batched(v, heads, attn, core=3)
    g_wo = np.swapaxes(_weight_grad(g_, heads_), 1, 2)
    d_heads = g_[:, None] @ np.swapaxes(p.w_o, 1, 2)[None]
    d_attn = d_heads @ np.swapaxes(v_, -1, -2)
    if grad_attn is not None:
        d_attn = d_attn + _batched(grad_attn, core=3)[0]
    dv = np.swapaxes(attn_, -1, -2) @ d_heads
    grads, dx = _score_backward(x_, p, attn_, *_batched(cache["q"], cache["k"], core=3), d_attn)
    grads["w_v"] = _weight_grad(x_, dv)
    grads["w_o"] = g_wo
    grads["x"] = (dx + _merge_heads(dv, p.w_v)).reshape(lead + x.shape[-2:])
    return grads


# -- Transformer layer -----------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(z, return_grad=False):
    """tanh approximation of GeLU."""
    inner = _GELU_C * (z + 0.044715 * (z * z * z))
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)
    if not return_grad:
        return out
    grad = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return out, grad


def layer_norm(x, g, b, eps=1e-5, return_cache=False):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * g + b
    if return_cache:
        return out, (xhat, inv)
    return out


def _layer_norm_backward(dout, g, cache):
    xhat, inv = cache
    lead = tuple(range(dout.ndim - 1))
    dg = np.sum(dout * xhat, axis=lead)
    db = np.sum(dout, axis=lead)
    dxhat = dout * g
    d = xhat.shape[-1]
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * np.sum(dxhat * xhat, -1, keepdims=True))
    return dx, dg, db


def transformer_layer_forward(x: np.ndarray, p: TransformerLayerParams, return_cache=False, key_mask=None):
    """H = X + MSA(X), out = H + MLP(H); accepts a leading batch axis."""
    cache = {}
    if p.norm_mode == "pre":
        xin, cache["ln1"] = layer_norm(x, p.ln["g1"], p.ln["b1"], return_cache=True)
    else:
        xin = x
    msa_out, attn, cache["msa"] = msa_forward(xin, p.msa, return_cache=True, key_mask=key_mask)
    h = x + msa_out
    if p.norm_mode == "pre":
        hin, cache["ln2"] = layer_norm(h, p.ln["g2"], p.ln["b2"], return_cache=True)
    else:
        hin = h
    if p.exact_mlp is not None:
        out = h + p.exact_mlp(hin)
    else:
        pre = hin @ p.mlp.w1 + p.mlp.b1
        act, dact = gelu(pre, return_grad=True)
        out = h + act @ p.mlp.w2 + p.mlp.b2
        cache.update(pre=pre, act=act, dact=dact)
    if return_cache:
        cache.update(xin=xin, hin=hin, attn=attn)
        return out, cache
    return out


def transformer_layer_backward(grad_out, p: TransformerLayerParams, cache) -> dict:
    """Gradients w.r.t. every learned parameter of the layer and its input.

    Keys: ``msa.<name>``, ``mlp.<name>``, ``ln.<name>`` and ``x``.
    """
    if p.exact_mlp is not None:
        raise ValueError("cannot differentiate through an exact (closed-form) MLP")
    grads = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    d_act = grad_out @ p.mlp.w2.T
    grads["mlp.w2"] = flat(cache["act"]).T @ flat(grad_out)
    grads["mlp.b2"] = flat(grad_out).sum(axis=0)
    d_pre = d_act * cache["dact"]
    grads["mlp.w1"] = flat(cache["hin"]).T @ flat(d_pre)
    grads["mlp.b1"] = flat(d_pre).sum(axis=0)
    d_hin = d_pre @ p.mlp.w1.T
    if p.norm_mode == "pre":
        d_hin, grads["ln.g2"], grads["ln.b2"] = _layer_norm_backward(d_hin, p.ln["g2"], cache["ln2"])
    dh = grad_out + d_hin
    mg = msa_backward(cache["xin"], p.msa, cache["attn"], cache["msa"], dh)
    d_xin = mg.pop("x")
    grads.update({f"msa.{k}": v for k, v in mg.items()})
    if p.norm_mode == "pre":
        d_xin, grads["ln.g1"], grads["ln.b1"] = _layer_norm_backward(d_xin, p.ln["g1"], cache["ln1"])
    grads["x"] = dh + d_xin
    return grads


# -- kernelized attention --------------------------------------------------------------


def exact_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v, materialising the N x N matrix."""
    return softmax_rows(q @ k.T / np.sqrt(q.shape[1])) @ v


def _orthogonal_gaussian_rows(m: int, d: int, rng) -> np.ndarray:
    blocks = []
    remaining = m
    while remaining > 0:
        q = qr_orthonormal(rng.standard_normal((d, d)))
        blocks.append(q.T[: min(d, remaining)])
        remaining -= d
    omega = np.vstack(blocks)
    # rows of a Gaussian matrix have chi-distributed norms; keep that marginal
    norms = np.linalg.norm(rng.standard_normal((m, d)), axis=1)
    return omega * norms[:, None]


def favor_features(x, omega, is_query: bool):
    """Positive random features exp(w^T x - |x|^2 / 2) / sqrt(m), stabilised.

    The stabiliser is a per-row constant for queries and a single global
    constant for keys, so it cancels in the attention ratio.
    """
    proj = x @ omega.T - 0.5 * np.sum(x * x, axis=1, keepdims=True)
    if is_query:
        proj = proj - proj.max(axis=1, keepdims=True)
    else:
        proj = proj - proj.max()
    return np.exp(proj) / np.sqrt(omega.shape[0])


def favor_attention(q, k, v, cfg: KernelAttentionConfig):
    """Linear-memory approximation of softmax(q k^T / sqrt(d)) v.

    Computes phi(Q) (phi(K)^T V) / phi(Q) (phi(K)^T 1) and never forms an
    N x N matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError("keys and values must have the same length")
    d = q.shape[1]
    scale = d**-0.25
    omega = _orthogonal_gaussian_rows(cfg.num_features, d, make_rng(cfg.seed))
    phi_q = favor_features(q * scale, omega, True)
    phi_k = favor_features(k * scale, omega, False)
    kv = phi_k.T @ v
    denom = phi_q @ phi_k.sum(axis=0)
    if not np.all(np.isfinite(denom)) or np.any(denom <= 1e-300):
        bad = int(np.argmin(denom))
        raise FloatingPointError(f"kernel attention denominator underflowed for query {bad} (value {denom[bad]!r})")
    return (phi_q @ kv) / denom[:, None]


# -- analysis --------------------------------------------------------------------------


def _anchors(ts):
    return [sorted(set(mi)) if kind not in ("graph_special", "null_special") else [] for kind, mi in zip(ts.kinds, ts.multi_indices)]


def token_distances(ts, hops: np.ndarray) -> np.ndarray:
    """Token-pair hop distance: mean over anchor-node pairs; NaN for specials."""
    anchors = _anchors(ts)
    N = len(anchors)
    out = np.full((N, N), np.nan)
    for i in range(N):
        if not anchors[i]:
            continue
        for j in range(N):
            if anchors[j]:
                out[i, j] = hops[np.ix_(anchors[i], anchors[j])].mean()
    return out


def attention_distance(attn: np.ndarray, ts, hops: np.ndarray, per_query: bool = False) -> np.ndarray:
    """Mean attention distance in hops, one value per head.

    Special tokens and unreachable pairs are dropped and the remaining
    weights of each query row renormalised.
    """
    attn = np.asarray(attn)
    if attn.ndim == 2:
        attn = attn[None]
    dist = token_distances(ts, hops)
    valid = np.isfinite(dist) & (dist != UNREACHABLE)
    if not valid.any():
        raise ValueError("no token pair has a finite hop distance")
    d = np.where(valid, dist, 0.0)
    w = np.where(valid[None], attn, 0.0)
    mass = w.sum(axis=-1)
    rows = mass > 0
    per_row = np.where(rows, (w * d[None]).sum(-1) / np.where(rows, mass, 1.0), np.nan)
    if per_query:
        return per_row
    out = np.array([np.nanmean(r) if np.any(np.isfinite(r)) else np.nan for r in per_row])
    if np.all(np.isnan(out)):
        raise ValueError("no query token has attention on a reachable token")
    return out


def write_attention_csv(attn: np.ndarray, ts, path, head: int | None = None) -> None:
    """One row per query token; header columns are annotated with token kinds."""
    with open(path, "w", newline="") as fh:
        if head is not None:
            fh.write(f"# head={head}\n")
        w = csv.writer(fh)
        w.writerow(["query", "query_kind"] + [f"{j}:{kind}" for j, kind in enumerate(ts.kinds)])
        for i, row in enumerate(np.asarray(attn)):
            w.writerow([i, ts.kinds[i]] + [repr(float(a)) for a in row])

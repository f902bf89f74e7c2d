"""Learned equivariant-basis approximation on Barabasi-Albert graphs.

A single self-attention layer sees ``[null; X_in w_in]`` and each of its 15
heads is supervised to reproduce one row-normalised order-4 basis tensor.
Rows whose basis row is empty target the ``[null]`` token.

Gradients are written out by hand; the batch is padded to the longest
sequence and padded keys are masked out of the softmax.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .attention import _merge_heads, _proj, _weight_grad
from .equivariant import class_index_tensor, enumerate_classes
from .graphs import Graph, barabasi_albert, hop_distances
from .identifiers import (
    eigvec_dropout,
    lap_identifiers,
    orf_identifiers,
    random_nonorthogonal_identifiers,
    random_type_identifiers,
    sign_flip_augment,
)
from .numerics import AdamWState, adamw_step, make_rng
from .tokenizer import TokenSequence, prepend_special, tokenize_dense, tokenize_sparse

__all__ = [
    "NODE_ID_MODES",
    "MODE_ALIASES",
    "SyntheticConfig",
    "TrainingDiverged",
    "BasisTargets",
    "SyntheticItem",
    "ba_dataset",
    "prepare_items",
    "make_basis_targets",
    "init_synthetic_params",
    "synthetic_loss_and_grads",
    "train_synthetic",
    "eval_basis_l2",
    "eval_constructed_l2",
    "lr_schedule",
    "DESK_CONFIGS",
    "STUDY_MODES",
    "desk_config",
    "identifier_study",
]

HEAD_CLASSES = enumerate_classes(4)
NODE_ID_MODES = ("none", "random", "random-first-order", "orf", "orf-first-order", "lap")
# short names accepted on the command line
MODE_ALIASES = {"type-only": ("none", True), "random-nonorth": ("random", None)}
_MASKED = -1e9

# Reduced settings that finish a 3-seed, 5-mode, 2-layout sweep on one CPU core in
# about half an hour. Dense sequences are ~4x longer, so rows are subsampled.
DESK_CONFIGS = {
    "sparse": dict(d=64, d_H=32, steps=300, warmup=60, lr=3e-2, batch_size=32),
    "dense": dict(d=64, d_H=32, steps=300, warmup=60, lr=3e-2, batch_size=16, rows_per_graph=32),
}
# study label -> (node_ids, type_ids)
STUDY_MODES = {
    "none": ("none", False),
    "type-only": ("none", True),
    "random+type": ("random", True),
    "orf+type": ("orf", True),
    "orf-first-order+type": ("orf-first-order", True),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SyntheticConfig:
    layout: str = "sparse"
    node_ids: str = "orf"
    type_ids: bool = True
    d: int = 256
    H: int = 15
    d_H: int = 64
    d_p: int | None = None
    d_e: int = 8
    steps: int = 1500
    warmup: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    dropout: float = 0.1
    rows_per_graph: int | None = None
    lap_dropout: float = 0.0
    train_size: int = 512
    test_size: int = 64
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.node_ids in MODE_ALIASES:
            mode, types = MODE_ALIASES[self.node_ids]
            self.node_ids = mode
            self.type_ids = self.type_ids if types is None else types
        if self.layout not in ("sparse", "dense"):
            raise ValueError(f"layout must be 'sparse' or 'dense', got {self.layout!r}")
        if self.node_ids not in NODE_ID_MODES:
            raise ValueError(f"unknown identifier mode {self.node_ids!r}; choose from {NODE_ID_MODES}")
        if self.H != len(HEAD_CLASSES):
            raise ValueError(f"the order-2 study needs H = bell(4) = {len(HEAD_CLASSES)} heads")
        if not 0 <= self.warmup <= self.steps:
            raise ValueError("warmup must lie in [0, steps]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.d_p is None:
            self.d_p = 20 if self.node_ids == "lap" else 24
        for name in ("d", "d_H", "d_p", "d_e", "batch_size", "train_size", "test_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def mode_name(self) -> str:
        if self.node_ids == "none":
            return "type-only" if self.type_ids else "none"
        return self.node_ids + ("+type" if self.type_ids else "")

    @property
    def id_width(self) -> int:
        return 0 if self.node_ids == "none" else 2 * self.d_p

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ------------------------------------------------------------------------------


def _sample_graphs(count: int, rng) -> list:
    graphs = []
    for _ in range(count):
        n = int(rng.integers(10, 21))
        k = int(rng.integers(2, 4))
        graphs.append(barabasi_albert(n, k, int(rng.integers(2**63 - 1))))
    return graphs


def ba_dataset(train_n: int, test_n: int, seed) -> tuple[list, list]:
    """BA graphs with n ~ U{10..20}, k ~ U{2, 3}; train and test use separate streams."""
    if train_n < 1 or test_n < 1:
        raise ValueError("dataset sizes must be >= 1")
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    return _sample_graphs(train_n, np.random.default_rng(train_ss)), _sample_graphs(test_n, np.random.default_rng(test_ss))


class SyntheticItem(NamedTuple):
    graph: Graph
    i1: np.ndarray
    i2: np.ndarray
    type_index: np.ndarray
    lap: np.ndarray | None

    @property
    def num_tokens(self) -> int:
        return len(self.i1)


def _base_tokens(g: Graph, layout: str, p=None, per_token=None) -> TokenSequence:
    if layout == "sparse":
        return tokenize_sparse(g, p, None, per_token=per_token)
    return tokenize_dense(np.zeros((g.n, g.n, 0)), p, None, per_token=per_token)


def prepare_items(graphs, cfg: SyntheticConfig) -> list:
    items = []
    for g in graphs:
        ts = _base_tokens(g, cfg.layout)
        mi = np.array(ts.multi_indices, dtype=np.int64).reshape(-1, 2)
        lap = lap_identifiers(g, cfg.d_p) if cfg.node_ids == "lap" else None
        items.append(SyntheticItem(g, mi[:, 0], mi[:, 1], ts.type_index, lap))
    return items


def _identifier_channels(item: SyntheticItem, cfg: SyntheticConfig, rng, train: bool) -> np.ndarray:
    g = item.graph
    N = item.num_tokens
    mode = cfg.node_ids
    if mode == "none":
        return np.zeros((N, 0))
    if mode.endswith("first-order"):
        maker = orf_identifiers if mode.startswith("orf") else random_nonorthogonal_identifiers
        return _base_tokens(g, cfg.layout, per_token=maker(N, cfg.d_p, rng).P).channels
    if mode == "orf":
        p = orf_identifiers(g.n, cfg.d_p, rng)
    elif mode == "random":
        p = random_nonorthogonal_identifiers(g.n, cfg.d_p, rng)
    else:
        p = item.lap
        if train:
            p = sign_flip_augment(p, rng)
            if cfg.lap_dropout > 0:
                p = eigvec_dropout(p, cfg.lap_dropout, rng)
    return _base_tokens(g, cfg.layout, p=p).channels


# -- targets ---------------------------------------------------------------------------


class BasisTargets(NamedTuple):
    """``targets[h]`` is (N_total, N_total) with the [null] token at position 0.

    ``mask`` marks supervised rows (every token except [null]).
    """

    targets: np.ndarray
    mask: np.ndarray


def _row_targets(i1, i2, n: int, rows: np.ndarray) -> np.ndarray:
    """(H, len(rows), 1 + N) normalised basis rows, [null] in column 0."""
    table = class_index_tensor(4, n)
    idx = table[i1[rows, None], i2[rows, None], i1[None, :], i2[None, :]]
    hit = (idx[None] == np.arange(len(HEAD_CLASSES))[:, None, None]).astype(np.float64)
    count = hit.sum(axis=-1, keepdims=True)
    out = np.zeros(hit.shape[:2] + (hit.shape[2] + 1,))
    out[..., 1:] = np.divide(hit, count, out=np.zeros_like(hit), where=count > 0)
    out[..., 0] = (count[..., 0] == 0).astype(np.float64)
    return out


def make_basis_targets(ts: TokenSequence) -> BasisTargets:
    """Targets for a sequence with [null] at position 0 and order-2 token metadata."""
    if not ts.kinds or ts.kinds[0] != "null_special":
        raise ValueError("the sequence must start with a [null] token")
    mis = ts.multi_indices[1:]
    if any(len(mi) != 2 for mi in mis):
        raise ValueError("every token needs an order-2 multi-index")
    mi = np.array(mis, dtype=np.int64).reshape(-1, 2)
    N = len(mi)
    full = np.zeros((len(HEAD_CLASSES), N + 1, N + 1))
    if N:
        full[:, 1:, :] = _row_targets(mi[:, 0], mi[:, 1], ts.n, np.arange(N))
    mask = np.ones(N + 1, dtype=bool)
    mask[0] = False
    return BasisTargets(full, mask)


# -- model -----------------------------------------------------------------------------


def init_synthetic_params(cfg: SyntheticConfig, seed=None) -> dict:
    rng = make_rng(cfg.seed if seed is None else seed)
    dt = np.dtype(cfg.dtype)
    c_in = cfg.id_width + (cfg.d_e if cfg.type_ids else 0)
    p = {
        "w_in": rng.standard_normal((c_in, cfg.d)) / math.sqrt(max(c_in, 1)),
        "null": rng.standard_normal(cfg.d),
        "w_q": rng.standard_normal((cfg.H, cfg.d, cfg.d_H)) / math.sqrt(cfg.d),
        "b_q": np.zeros((cfg.H, cfg.d_H)),
        "w_k": rng.standard_normal((cfg.H, cfg.d, cfg.d_H)) / math.sqrt(cfg.d),
        "b_k": np.zeros((cfg.H, cfg.d_H)),
    }
    if cfg.type_ids:
        p["E"] = random_type_identifiers(2, cfg.d_e, rng).E
    return {k: v.astype(dt) for k, v in p.items()}


class _Batch(NamedTuple):
    x: np.ndarray  # (B, N, C_id) identifier channels, row 0 = [null]
    tidx: np.ndarray  # (B, N) type index, 0 on [null] and padding
    valid: np.ndarray  # (B, N) real tokens including [null]
    rows: np.ndarray  # (B, R) query positions
    row_valid: np.ndarray  # (B, R)
    targets: np.ndarray  # (B, H, R, N)
    ncols: np.ndarray  # (B,) number of real columns


def _make_batch(items, cfg: SyntheticConfig, rngs, train: bool, row_rng=None) -> _Batch:
    dt = np.dtype(cfg.dtype)
    N = 1 + max(it.num_tokens for it in items)
    B = len(items)
    R_cap = cfg.rows_per_graph if (train and cfg.rows_per_graph) else None
    R = min(R_cap, N - 1) if R_cap else N - 1
    x = np.zeros((B, N, cfg.id_width), dt)
    tidx = np.zeros((B, N), np.int64)
    valid = np.zeros((B, N), bool)
    rows = np.zeros((B, R), np.int64)
    row_valid = np.zeros((B, R), bool)
    targets = np.zeros((B, cfg.H, R, N), dt)
    ncols = np.zeros(B)
    for b, (it, rng) in enumerate(zip(items, rngs)):
        T = it.num_tokens
        x[b, 1 : T + 1] = _identifier_channels(it, cfg, rng, train)
        tidx[b, 1 : T + 1] = it.type_index
        valid[b, : T + 1] = True
        if R_cap and T > R:
            chosen = np.sort(row_rng.choice(T, size=R, replace=False))
        else:
            chosen = np.arange(T)
        r = len(chosen)
        rows[b, :r] = chosen + 1
        row_valid[b, :r] = True
        targets[b, :, :r, : T + 1] = _row_targets(it.i1, it.i2, it.graph.n, chosen)
        ncols[b] = T + 1
    return _Batch(x, tidx, valid, rows, row_valid, targets, ncols)


def _forward(params, batch: _Batch, cfg: SyntheticConfig, drop_rng=None):
    dt = np.dtype(cfg.dtype)
    c = cfg.id_width
    z = batch.x @ params["w_in"][:c]
    if cfg.type_ids:
        z = z + (params["E"] @ params["w_in"][c:])[batch.tidx]
    z[:, 0] = params["null"]
    z = z * batch.valid[..., None]
    drop = None
    if drop_rng is not None and cfg.dropout > 0:
        drop = ((drop_rng.random(z.shape) >= cfg.dropout) / (1.0 - cfg.dropout)).astype(dt)
        z = z * drop
    B = z.shape[0]
    zr = z[np.arange(B)[:, None], batch.rows]
    q = _proj(zr, params["w_q"]) + params["b_q"][None, :, None, :]
    k = _proj(z, params["w_k"]) + params["b_k"][None, :, None, :]
    attn = q @ k.transpose(0, 1, 3, 2)
    attn *= dt.type(1.0 / math.sqrt(cfg.d_H))
    attn += np.where(batch.valid, dt.type(0.0), dt.type(_MASKED))[:, None, None, :]
    attn -= attn.max(axis=-1, keepdims=True)
    np.exp(attn, out=attn)
    attn /= attn.sum(axis=-1, keepdims=True)
    return {"z": z, "zr": zr, "q": q, "k": k, "attn": attn, "drop": drop}


def _per_graph_sq(attn, batch: _Batch):
    diff = (attn - batch.targets) * batch.row_valid[:, None, :, None]
    return diff, (diff**2).sum(axis=(2, 3))  # (B, H)


def _denominators(batch: _Batch):
    return batch.row_valid.sum(axis=1) * batch.ncols  # rows x columns per graph


def synthetic_loss_and_grads(params, batch: _Batch, cfg: SyntheticConfig, drop_rng=None, need_grads=True):
    """Mean over graphs of the mean squared error over (heads, rows, columns)."""
    fw = _forward(params, batch, cfg, drop_rng)
    attn = fw["attn"]
    diff, sq = _per_graph_sq(attn, batch)
    B, H = sq.shape
    denom = _denominators(batch)
    loss = float((sq.sum(axis=1) / (H * denom)).mean())
    if not need_grads:
        return loss, None
    dt = attn.dtype
    scale = (2.0 / (H * denom * B)).astype(dt)
    d_attn = diff * scale[:, None, None, None]
    ds = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    ds /= dt.type(math.sqrt(cfg.d_H))
    dq = ds @ fw["k"]
    dk = ds.transpose(0, 1, 3, 2) @ fw["q"]
    z, zr = fw["z"], fw["zr"]
    g = {
        "w_q": _weight_grad(zr, dq),
        "b_q": dq.sum(axis=(0, 2)),
        "w_k": _weight_grad(z, dk),
        "b_k": dk.sum(axis=(0, 2)),
    }
    dz = _merge_heads(dk, params["w_k"])
    dzr = _merge_heads(dq, params["w_q"])
    np.add.at(dz, (np.arange(B)[:, None], batch.rows), dzr * batch.row_valid[..., None])
    if fw["drop"] is not None:
        dz = dz * fw["drop"]
    dz = dz * batch.valid[..., None]
    g["null"] = dz[:, 0].sum(axis=0)
    dz[:, 0] = 0
    c = cfg.id_width
    gw = np.zeros_like(params["w_in"])
    gw[:c] = batch.x.reshape(-1, c).T @ dz.reshape(-1, cfg.d) if c else 0.0
    if cfg.type_ids:
        d_te = np.zeros((params["E"].shape[0], cfg.d), dt)
        np.add.at(d_te, batch.tidx.ravel(), dz.reshape(-1, cfg.d))
        gw[c:] = params["E"].T @ d_te
        g["E"] = d_te @ params["w_in"][c:].T
    g["w_in"] = gw
    return loss, g


# -- training --------------------------------------------------------------------------


def lr_schedule(step: int, cfg: SyntheticConfig) -> float:
    """Linear warmup to the peak, then linear decay to zero."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    tail = max(cfg.steps - cfg.warmup, 1)
    return cfg.lr * max(0.0, (cfg.steps - step) / tail)


@dataclass
class SyntheticRun:
    params: dict
    history: list = field(default_factory=list)
    config: SyntheticConfig | None = None


def train_synthetic(cfg: SyntheticConfig, train_graphs=None, log_every: int = 0, logger=None) -> SyntheticRun:
    """AdamW on the basis-approximation loss; identifiers are redrawn each epoch."""
    if train_graphs is None:
        train_graphs, _ = ba_dataset(cfg.train_size, cfg.test_size, cfg.seed)
    items = prepare_items(train_graphs, cfg)
    params = init_synthetic_params(cfg)
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = make_rng([cfg.seed, 1])
    drop_rng = make_rng([cfg.seed, 2])
    row_rng = make_rng([cfg.seed, 3])
    history = []
    order = np.array([], dtype=np.int64)
    epoch = -1
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            epoch += 1
            order = np.concatenate([order, order_rng.permutation(len(items))])
        picked, order = order[: cfg.batch_size], order[cfg.batch_size :]
        rngs = [make_rng([cfg.seed, 4, epoch, int(i)]) for i in picked]
        batch = _make_batch([items[i] for i in picked], cfg, rngs, True, row_rng)
        loss, grads = synthetic_loss_and_grads(params, batch, cfg, drop_rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} (mode {cfg.mode_name}, layout {cfg.layout})")
        params, state = adamw_step(params, grads, state, lr=lr_schedule(step, cfg))
        history.append(loss)
        if log_every and logger is not None and (step % log_every == 0 or step == cfg.steps - 1):
            logger.info("step %d loss %.6g", step, loss)
    return SyntheticRun(params, history, cfg)


def eval_basis_l2(params, graphs, cfg: SyntheticConfig, batch_size: int = 8, attention_fn=None) -> dict:
    """Per-head and mean L2 over ``graphs`` (no dropout, all rows).

    Identifiers are drawn from a fixed evaluation stream, so repeated calls
    agree. ``attention_fn(batch)`` may replace the model's attention.
    """
    items = prepare_items(graphs, cfg)
    per_head = np.zeros(cfg.H)
    per_graph = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        rngs = [make_rng([cfg.seed, 5, start + j]) for j in range(len(chunk))]
        batch = _make_batch(chunk, cfg, rngs, train=False)
        attn = _forward(params, batch, cfg)["attn"] if attention_fn is None else attention_fn(batch)
        _, sq = _per_graph_sq(attn, batch)
        vals = sq / _denominators(batch)[:, None]
        per_head += vals.sum(axis=0)
        per_graph.extend(vals.mean(axis=1).tolist())
    per_head /= len(items)
    return {"per_head": per_head, "mean": float(per_head.mean()), "per_graph": np.array(per_graph)}


def oracle_attention(batch: _Batch) -> np.ndarray:
    """The targets themselves, for the perfect-injection check."""
    return batch.targets


def eval_constructed_l2(graphs, a: float = 1e3, d_p: int = 24, seed=0) -> dict:
    """Basis L2 of the explicitly constructed heads on dense tokens with ORF identifiers.

    The construction has no [null] sink, so rows whose basis row is empty
    are left out of the average.
    """
    from .constructive import ConstructiveConfig, _normalized_basis, constructed_logits

    cfg = ConstructiveConfig(2, d_p, 2, a, HEAD_CLASSES)
    per_head = np.zeros(len(HEAD_CLASSES))
    per_graph = []
    for idx, g in enumerate(graphs):
        if g.n > d_p:
            raise ValueError(f"graph with {g.n} nodes needs d_p >= n for orthonormal identifiers")
        P = orf_identifiers(g.n, d_p, make_rng([seed, 6, idx]))
        logits = constructed_logits(g.n, cfg, P)
        attn = np.exp(logits - logits.max(axis=-1, keepdims=True))
        attn /= attn.sum(axis=-1, keepdims=True)
        vals = np.zeros(len(HEAD_CLASSES))
        for h, mu in enumerate(HEAD_CLASSES):
            target, rows = _normalized_basis(mu, g.n)
            vals[h] = float(((attn[h][rows] - target[rows]) ** 2).mean()) if rows.any() else 0.0
        per_head += vals
        per_graph.append(vals.mean())
    per_head /= max(len(graphs), 1)
    return {"per_head": per_head, "mean": float(per_head.mean()), "per_graph": np.array(per_graph)}


def desk_config(layout: str, mode: str, seed: int = 0, **overrides) -> SyntheticConfig:
    """Desk-sized :class:`SyntheticConfig` for one study label from ``STUDY_MODES``."""
    if mode not in STUDY_MODES:
        raise ValueError(f"unknown study mode {mode!r}; choose from {tuple(STUDY_MODES)}")
    node_ids, type_ids = STUDY_MODES[mode]
    kwargs = dict(DESK_CONFIGS[layout])
    kwargs.update(overrides)
    return SyntheticConfig(layout=layout, node_ids=node_ids, type_ids=type_ids, seed=seed, **kwargs)


def identifier_study(seeds=(0, 1, 2), layouts=("sparse", "dense"), modes=tuple(STUDY_MODES), logger=None, **overrides) -> list:
    """Train every (layout, mode, seed) combination; one result dict per run.

    Each seed draws its own BA dataset, shared by all modes of that seed.
    """
    results = []
    for seed in seeds:
        train, test = ba_dataset(overrides.get("train_size", 512), overrides.get("test_size", 64), seed)
        for layout in layouts:
            for mode in modes:
                cfg = desk_config(layout, mode, seed, **overrides)
                run = train_synthetic(cfg, train)
                res = eval_basis_l2(run.params, test, cfg)
                results.append(dict(layout=layout, mode=mode, seed=seed, test_l2=res["mean"], history=run.history))
                if logger is not None:
                    logger.info("%s %s seed %d: test L2 %.3e", layout, mode, seed, res["mean"])
    return results

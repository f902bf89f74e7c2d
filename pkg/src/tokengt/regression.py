"""Triangle-count regression with and without node/type identifiers.

Without identifiers every graph token looks the same, so the prediction can
only depend on how many tokens there are. With ORF node identifiers and type
identifiers the model can read incidence and do better.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    MLPParams,
    MSAParams,
    TransformerLayerParams,
    layer_norm,
    transformer_layer_backward,
    transformer_layer_forward,
)
from .experiments import ba_dataset, lr_schedule
from .graphs import Graph, triangle_count
from .identifiers import orf_identifiers, random_type_identifiers
from .numerics import AdamWState, adamw_step, make_rng
from .tokenizer import tokenize_sparse

__all__ = [
    "RegressionConfig",
    "TokenGTRegressor",
    "conditional_variance_bound",
    "train_regression_demo",
    "attention_distance_report",
]


@dataclass
class RegressionConfig:
    ids: str = "orf"
    layers: int = 2
    d: int = 32
    H: int = 4
    d_H: int = 8
    d_F: int = 64
    d_p: int = 20
    d_e: int = 8
    steps: int = 1500
    warmup: int = 150
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    train_size: int = 1024
    test_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.ids not in ("orf", "none"):
            raise ValueError(f"ids must be 'orf' or 'none', got {self.ids!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0 <= self.warmup <= self.steps:
            raise ValueError("warmup must lie in [0, steps]")

    @property
    def c_in(self) -> int:
        return 2 * self.d_p + self.d_e if self.ids == "orf" else 0

    def to_dict(self) -> dict:
        return asdict(self)


def conditional_variance_bound(graphs, y) -> float:
    """Smallest MSE any function of (n, m) can reach on exactly these graphs."""
    groups = defaultdict(list)
    for g, v in zip(graphs, y):
        groups[(g.n, g.m)].append(float(v))
    sse = sum(((np.array(v) - np.mean(v)) ** 2).sum() for v in groups.values())
    return float(sse / len(y))


class TokenGTRegressor:
    """Pre-LN Transformer over ``[graph]`` + node + edge tokens, read out at ``[graph]``."""

    def __init__(self, cfg: RegressionConfig):
        self.cfg = cfg
        rng = make_rng([cfg.seed, 11])
        d = cfg.d
        p = {
            "w_in": rng.standard_normal((cfg.c_in, d)) / math.sqrt(max(cfg.c_in, 1)),
            "graph": 0.1 * rng.standard_normal(d),
            "head.w": rng.standard_normal((d, 1)) / math.sqrt(d),
            "head.b": np.zeros(1),
            "lnf.g": np.ones(d),
            "lnf.b": np.zeros(d),
        }
        if cfg.ids == "orf":
            p["E"] = random_type_identifiers(2, cfg.d_e, rng).E
        for t in range(cfg.layers):
            s = 1.0 / math.sqrt(d)
            p.update(
                {
                    f"L{t}.msa.w_q": s * rng.standard_normal((cfg.H, d, cfg.d_H)),
                    f"L{t}.msa.b_q": np.zeros((cfg.H, cfg.d_H)),
                    f"L{t}.msa.w_k": s * rng.standard_normal((cfg.H, d, cfg.d_H)),
                    f"L{t}.msa.b_k": np.zeros((cfg.H, cfg.d_H)),
                    f"L{t}.msa.w_v": s * rng.standard_normal((cfg.H, d, cfg.d_H)),
                    f"L{t}.msa.w_o": rng.standard_normal((cfg.H, cfg.d_H, d)) / math.sqrt(cfg.H * cfg.d_H * cfg.layers),
                    f"L{t}.mlp.w1": s * rng.standard_normal((d, cfg.d_F)),
                    f"L{t}.mlp.b1": np.zeros(cfg.d_F),
                    f"L{t}.mlp.w2": rng.standard_normal((cfg.d_F, d)) / math.sqrt(cfg.d_F * cfg.layers),
                    f"L{t}.mlp.b2": np.zeros(d),
                    f"L{t}.ln.g1": np.ones(d),
                    f"L{t}.ln.b1": np.zeros(d),
                    f"L{t}.ln.g2": np.ones(d),
                    f"L{t}.ln.b2": np.zeros(d),
                }
            )
        self.params = p

    def layer(self, t: int) -> TransformerLayerParams:
        p = self.params
        msa = MSAParams(*(p[f"L{t}.msa.{k}"] for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "w_o")))
        mlp = MLPParams(*(p[f"L{t}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")))
        ln = {k: p[f"L{t}.ln.{k}"] for k in ("g1", "b1", "g2", "b2")}
        return TransformerLayerParams(msa, mlp=mlp, norm_mode="pre", ln=ln)

    # -- inputs ----------------------------------------------------------------

    def token_channels(self, g: Graph, rng) -> tuple[np.ndarray, np.ndarray]:
        """Identifier channels (without type ids) and type indices of the graph tokens."""
        if self.cfg.ids == "none":
            ts = tokenize_sparse(g, None, None)
            return ts.channels, ts.type_index
        ts = tokenize_sparse(g, orf_identifiers(g.n, self.cfg.d_p, rng), None)
        return ts.channels, ts.type_index

    def _batch(self, graphs, rngs):
        chans = [self.token_channels(g, r) for g, r in zip(graphs, rngs)]
        N = 1 + max(len(c) for c, _ in chans)
        B = len(graphs)
        width = 2 * self.cfg.d_p if self.cfg.ids == "orf" else 0
        x = np.zeros((B, N, width))
        tidx = np.zeros((B, N), np.int64)
        mask = np.zeros((B, N), bool)
        for b, (c, t) in enumerate(chans):
            x[b, 1 : len(c) + 1] = c
            tidx[b, 1 : len(t) + 1] = t
            mask[b, : len(c) + 1] = True
        return x, tidx, mask

    # -- forward / backward ----------------------------------------------------

    def _embed(self, x, tidx, mask):
        p, cfg = self.params, self.cfg
        width = x.shape[-1]
        z = x @ p["w_in"][:width]
        if cfg.ids == "orf":
            z = z + (p["E"] @ p["w_in"][width:])[tidx]
        z[:, 0] = p["graph"]
        return z * mask[..., None]

    def forward(self, x, tidx, mask, return_cache=False):
        z = self._embed(x, tidx, mask)
        caches = []
        for t in range(self.cfg.layers):
            z, c = transformer_layer_forward(z, self.layer(t), return_cache=True, key_mask=mask)
            caches.append(c)
        top = z[:, 0]
        hf, ln_cache = layer_norm(top, self.params["lnf.g"], self.params["lnf.b"], return_cache=True)
        pred = (hf @ self.params["head.w"] + self.params["head.b"])[:, 0]
        if return_cache:
            return pred, (caches, hf, ln_cache)
        return pred

    def loss_and_grads(self, x, tidx, mask, y):
        from .attention import _layer_norm_backward

        p, cfg = self.params, self.cfg
        pred, (caches, hf, ln_cache) = self.forward(x, tidx, mask, return_cache=True)
        B = len(y)
        err = pred - y
        loss = float(np.mean(err**2))
        dpred = 2.0 * err / B
        g = {"head.w": hf.T @ dpred[:, None], "head.b": np.array([dpred.sum()])}
        dhf = dpred[:, None] * p["head.w"][:, 0][None, :]
        dtop, g["lnf.g"], g["lnf.b"] = _layer_norm_backward(dhf, p["lnf.g"], ln_cache)
        dz = np.zeros((B, x.shape[1], cfg.d))
        dz[:, 0] = dtop
        for t in reversed(range(cfg.layers)):
            lg = transformer_layer_backward(dz, self.layer(t), caches[t])
            dz = lg.pop("x")
            g.update({f"L{t}.{k}": v for k, v in lg.items()})
        dz = dz * mask[..., None]
        g["graph"] = dz[:, 0].sum(axis=0)
        dz[:, 0] = 0
        width = x.shape[-1]
        rows = x.shape[0] * x.shape[1]
        gw = np.zeros_like(p["w_in"])
        gw[:width] = x.reshape(rows, x.shape[-1]).T @ dz.reshape(rows, dz.shape[-1])
        if cfg.ids == "orf":
            d_te = np.zeros((2, cfg.d))
            np.add.at(d_te, tidx.ravel(), dz.reshape(-1, cfg.d))
            gw[width:] = p["E"].T @ d_te
            g["E"] = d_te @ p["w_in"][width:].T
        g["w_in"] = gw
        return loss, g

    # -- training loop ---------------------------------------------------------

    def fit(self, graphs, y):
        cfg = self.cfg
        y = np.asarray(y, dtype=np.float64)
        state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        order_rng = make_rng([cfg.seed, 12])
        order = np.array([], dtype=np.int64)
        epoch = -1
        self.history_ = []
        # sort each batch by size to limit padding
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                epoch += 1
                order = np.concatenate([order, order_rng.permutation(len(graphs))])
            picked, order = order[: cfg.batch_size], order[cfg.batch_size :]
            rngs = [make_rng([cfg.seed, 13, epoch, int(i)]) for i in picked]
            x, tidx, mask = self._batch([graphs[i] for i in picked], rngs)
            loss, grads = self.loss_and_grads(x, tidx, mask, y[picked])
            if not math.isfinite(loss):
                raise RuntimeError(f"regression loss became {loss} at step {step}")
            self.params, state = adamw_step(self.params, grads, state, lr=lr_schedule(step, cfg))
            self.history_.append(loss)
        return self

    def predict(self, graphs, batch_size: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(graphs), batch_size):
            chunk = graphs[start : start + batch_size]
            rngs = [make_rng([self.cfg.seed, 14, start + j]) for j in range(len(chunk))]
            out.append(self.forward(*self._batch(chunk, rngs)))
        return np.concatenate(out)


def train_regression_demo(cfg: RegressionConfig | None = None, graphs=None) -> dict:
    """Held-out MSE of the identifier model and the identifier-free model.

    Targets are triangle counts standardised on the training set.
    """
    cfg = RegressionConfig() if cfg is None else cfg
    if graphs is None:
        graphs = ba_dataset(cfg.train_size, cfg.test_size, cfg.seed)
    train, test = graphs
    y_tr = np.array([triangle_count(g) for g in train], dtype=np.float64)
    y_te = np.array([triangle_count(g) for g in test], dtype=np.float64)
    mu, sd = y_tr.mean(), y_tr.std()
    sd = sd if sd > 0 else 1.0
    y_tr, y_te = (y_tr - mu) / sd, (y_te - mu) / sd
    out = {"bound": conditional_variance_bound(test, y_te), "target_var": float(y_te.var())}
    for ids in ("orf", "none"):
        run_cfg = RegressionConfig(**{**cfg.to_dict(), "ids": ids})
        model = TokenGTRegressor(run_cfg).fit(train, y_tr)
        key = "with_ids" if ids == "orf" else "without_ids"
        out[f"mse_{key}"] = float(np.mean((model.predict(test) - y_te) ** 2))
        out[f"train_mse_{key}"] = float(np.mean((model.predict(train) - y_tr) ** 2))
        out[f"history_{key}"] = model.history_
        out[f"params_{key}"] = model.params
    return out


def attention_distance_report(model: TokenGTRegressor, graphs, seed: int = 0) -> list:
    """Rows ``(layer, head, mean_hops)`` averaged over graphs with at least two nodes."""
    from .attention import attention_distance
    from .graphs import hop_distances
    from .tokenizer import prepend_special

    cfg = model.cfg
    totals = np.zeros((cfg.layers, cfg.H))
    counts = np.zeros((cfg.layers, cfg.H))
    for gi, g in enumerate(graphs):
        if g.n < 2:
            continue
        x, tidx, mask = model._batch([g], [make_rng([seed, 15, gi])])
        _, (caches, _, _) = model.forward(x, tidx, mask, return_cache=True)
        ts = prepend_special(tokenize_sparse(g, None, None), "graph_special")
        hops = hop_distances(g)
        for t, cache in enumerate(caches):
            dist = attention_distance(cache["attn"][0], ts, hops)
            ok = np.isfinite(dist)
            totals[t, ok] += dist[ok]
            counts[t, ok] += 1
    if not counts.any():
        raise ValueError("no graph with at least two nodes")
    mean = np.divide(totals, counts, out=np.full_like(totals, np.nan), where=counts > 0)
    return [(t, h, float(mean[t, h])) for t in range(cfg.layers) for h in range(cfg.H)]

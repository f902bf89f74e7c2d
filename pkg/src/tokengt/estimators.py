"""scikit-learn style wrappers around the graph models.

Inputs are lists of :class:`~tokengt.graphs.Graph`, not feature matrices, so
``X`` is validated by :func:`check_graphs` rather than ``check_array``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import column_or_1d
from sklearn.utils.validation import check_is_fitted

from .experiments import SyntheticConfig, eval_basis_l2, train_synthetic
from .graphs import Graph
from .regression import RegressionConfig, TokenGTRegressor

__all__ = ["check_graphs", "check_targets", "GraphTransformerRegressor", "BasisAttentionLearner"]


def check_graphs(X, min_graphs: int = 1) -> list:
    """Return ``X`` as a list of graphs, raising ``ValueError``/``TypeError`` otherwise."""
    if isinstance(X, Graph):
        raise TypeError("expected a sequence of Graph objects, got a single Graph")
    try:
        graphs = list(X)
    except TypeError as exc:
        raise TypeError(f"expected a sequence of Graph objects, got {type(X).__name__}") from exc
    bad = [type(g).__name__ for g in graphs if not isinstance(g, Graph)]
    if bad:
        raise TypeError(f"expected Graph objects, found {bad[0]}")
    if len(graphs) < min_graphs:
        raise ValueError(f"need at least {min_graphs} graph(s), got {len(graphs)}")
    return graphs


def check_targets(graphs: list, y) -> np.ndarray:
    y = column_or_1d(np.asarray(y, dtype=np.float64), warn=True)
    if len(y) != len(graphs):
        raise ValueError(f"got {len(graphs)} graphs but {len(y)} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or infinity")
    return y


class GraphTransformerRegressor(RegressorMixin, BaseEstimator):
    """Graph-level regression with a pre-LN Transformer over node and edge tokens.

    Targets are standardised internally; ``predict`` returns the original scale.
    """

    def __init__(self, ids="orf", layers=2, d=32, heads=4, d_head=8, d_ff=64, steps=1500, warmup=150, lr=3e-3, weight_decay=0.01, batch_size=32, random_state=0):
        self.ids = ids
        self.layers = layers
        self.d = d
        self.heads = heads
        self.d_head = d_head
        self.d_ff = d_ff
        self.steps = steps
        self.warmup = warmup
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> RegressionConfig:
        return RegressionConfig(
            ids=self.ids,
            layers=self.layers,
            d=self.d,
            H=self.heads,
            d_H=self.d_head,
            d_F=self.d_ff,
            steps=self.steps,
            warmup=min(self.warmup, self.steps),
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, X, y):
        graphs = check_graphs(X)
        y = check_targets(graphs, y)
        self.y_mean_ = float(y.mean())
        self.y_scale_ = float(y.std()) or 1.0
        self.model_ = TokenGTRegressor(self._config()).fit(graphs, (y - self.y_mean_) / self.y_scale_)
        self.history_ = self.model_.history_
        self.n_graphs_seen_ = len(graphs)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict(check_graphs(X)) * self.y_scale_ + self.y_mean_


class BasisAttentionLearner(BaseEstimator):
    """Single attention layer trained so its 15 heads reproduce the order-4 basis tensors.

    ``score`` returns the negative mean basis L2 so that larger is better.
    ``transform`` returns the per-graph L2 as a column.
    """

    def __init__(self, layout="sparse", node_ids="orf", type_ids=True, d=64, d_head=32, steps=300, warmup=60, lr=3e-2, batch_size=16, rows_per_graph=None, random_state=0):
        self.layout = layout
        self.node_ids = node_ids
        self.type_ids = type_ids
        self.d = d
        self.d_head = d_head
        self.steps = steps
        self.warmup = warmup
        self.lr = lr
        self.batch_size = batch_size
        self.rows_per_graph = rows_per_graph
        self.random_state = random_state

    def _config(self) -> SyntheticConfig:
        return SyntheticConfig(
            layout=self.layout,
            node_ids=self.node_ids,
            type_ids=self.type_ids,
            d=self.d,
            d_H=self.d_head,
            steps=self.steps,
            warmup=min(self.warmup, self.steps),
            lr=self.lr,
            batch_size=self.batch_size,
            rows_per_graph=self.rows_per_graph,
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        graphs = check_graphs(X)
        cfg = self._config()
        run = train_synthetic(cfg, graphs)
        self.params_, self.history_, self.config_ = run.params, run.history, cfg
        return self

    def _evaluate(self, X) -> dict:
        check_is_fitted(self, "params_")
        return eval_basis_l2(self.params_, check_graphs(X), self.config_)

    def transform(self, X) -> np.ndarray:
        return self._evaluate(X)["per_graph"][:, None]

    def score(self, X, y=None) -> float:
        return -self._evaluate(X)["mean"]

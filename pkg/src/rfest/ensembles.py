"""Random forests with quantile intervals, gradient boosting, split-count importance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from rfest.tree import TreeModel, TreeParams, _check_matrix, feature_order, fit_tree

# Cumulative weights within this distance of q count as reaching q.
CDF_ATOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_features: int | None = None  # None -> ceil(d / 3)
    min_samples_leaf: int = 5
    max_depth: int | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")


@dataclass(frozen=True)
class GbmParams:
    n_stages: int = 300
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 5
    max_features: int | None = None  # None -> all features

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if self.n_stages < 0:
            raise ValueError("n_stages must be >= 0")


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    # every tree draws from its own stream so fitting order never matters
    return np.random.default_rng([seed, index])


@dataclass(eq=False)
class ForestModel:
    """Bagged regression trees that keep their leaf memberships.

    Leaf membership counts bootstrap repeats, so a row drawn twice into a
    leaf carries twice the quantile weight of a row drawn once.
    """

    trees: list[TreeModel]
    y_train: np.ndarray
    seed: int
    params: ForestParams
    n_features: int
    _leaf_matrix: sparse.csr_matrix | None = field(default=None, repr=False)
    _leaf_offsets: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _stacked_leaves(self):
        # rows: (tree, leaf) pairs; columns: training rows; entries count/size
        if self._leaf_matrix is None:
            blocks, offsets, total = [], [0], 0
            n = len(self.y_train)
            for tree in self.trees:
                counts = sparse.coo_matrix(
                    (np.ones(len(tree.sample_rows)), (tree.leaf_of_sample, tree.sample_rows)),
                    shape=(tree.n_nodes, n)).tocsr()
                sizes = np.maximum(tree.n_node_samples, 1).astype(float)
                blocks.append(sparse.diags(1.0 / sizes) @ counts)
                total += tree.n_nodes
                offsets.append(total)
            self._leaf_matrix = sparse.vstack(blocks).tocsr()
            self._leaf_offsets = np.asarray(offsets[:-1], dtype=np.int64)
        return self._leaf_matrix, self._leaf_offsets

    def apply(self, X) -> np.ndarray:
        """Leaf ids, shape (n_rows, n_trees)."""
        X = _check_matrix(X, self.n_features)
        return np.column_stack([t.apply(X) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def weights(self, X) -> np.ndarray:
        """Quantile-forest weights over training rows, shape (n_rows, n_train)."""
        leaves = self.apply(X)
        mat, offsets = self._stacked_leaves()
        n_rows = leaves.shape[0]
        pick = sparse.csr_matrix(
            (np.full(leaves.size, 1.0 / self.n_trees),
             (np.repeat(np.arange(n_rows), self.n_trees), (leaves + offsets).ravel())),
            shape=(n_rows, mat.shape[0]))
        return (pick @ mat).toarray()

    def quantiles(self, X, qs) -> np.ndarray:
        """Left-continuous inverse of the weighted CDF, shape (n_rows, len(qs))."""
        qs = np.atleast_1d(np.asarray(qs, dtype=float))
        if np.any((qs <= 0) | (qs >= 1)):
            raise ValueError("quantile levels must lie in (0, 1)")
        W = self.weights(X)
        order = np.argsort(self.y_train, kind="stable")
        cdf = np.cumsum(W[:, order], axis=1)
        ys = self.y_train[order]
        out = np.empty((W.shape[0], len(qs)))
        for j, q in enumerate(qs):
            reached = cdf >= q - CDF_ATOL
            out[:, j] = ys[np.argmax(reached, axis=1)]
        return out

    def interval(self, X, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        check_alpha(alpha)
        q = self.quantiles(X, [(1 - alpha) / 2, (1 + alpha) / 2])
        return q[:, 0], q[:, 1]

    def to_dict(self) -> dict:
        return {
            "kind": "forest",
            "seed": self.seed,
            "n_features": self.n_features,
            "params": vars(self.params),
            "y_train": self.y_train.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> ForestModel:
        return cls(trees=[TreeModel.from_dict(t) for t in data["trees"]],
                   y_train=np.asarray(data["y_train"], dtype=float),
                   seed=int(data["seed"]), params=ForestParams(**data["params"]),
                   n_features=int(data["n_features"]))


def check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {alpha}")


def fit_forest(X, y, params: ForestParams | None = None, seed: int = 0) -> ForestModel:
    params = params or ForestParams()
    X = _check_matrix(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot fit a forest on empty data")
    m = params.max_features or math.ceil(d / 3)
    tree_params = TreeParams(max_depth=params.max_depth,
                             min_samples_leaf=params.min_samples_leaf, max_features=m)
    order = feature_order(X)
    trees = []
    for t in range(params.n_trees):
        rng = _tree_rng(seed, t)
        rows = np.sort(rng.integers(0, n, size=n))
        trees.append(fit_tree(X, y, tree_params, sample_rows=rows, seed=rng, order=order))
    return ForestModel(trees, y.copy(), seed, params, d)


def forest_predict_mean(model: ForestModel, x) -> float:
    return float(model.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


def qrf_weights(model: ForestModel, x) -> np.ndarray:
    return model.weights(np.asarray(x, dtype=float).reshape(1, -1))[0]


def qrf_quantile(model: ForestModel, x, q: float) -> float:
    return float(model.quantiles(np.asarray(x, dtype=float).reshape(1, -1), [q])[0, 0])


def weighted_quantile(values, weights, q: float) -> float:
    """Smallest value whose weighted CDF reaches ``q``."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    cdf = np.cumsum(np.asarray(weights, dtype=float)[order])
    return float(values[order][np.argmax(cdf >= q - CDF_ATOL)])


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    alpha: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"interval lower bound {self.lower} exceeds upper {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def clamp(self, lo: float = 0.0, hi: float = 100.0) -> PredictionInterval:
        lower = min(max(self.lower, lo), hi)
        upper = max(min(self.upper, hi), lo)
        return PredictionInterval(lower, upper, self.alpha)

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def qrf_interval(model: ForestModel, x, alpha: float) -> PredictionInterval:
    lo, hi = model.interval(np.asarray(x, dtype=float).reshape(1, -1), alpha)
    return PredictionInterval(float(lo[0]), float(hi[0]), alpha)


@dataclass(eq=False)
class GbmModel:
    """Squared-loss gradient boosting: ``F0 + lr * sum(tree_j(x))``."""

    init: float
    trees: list[TreeModel]
    params: GbmParams
    seed: int
    n_features: int

    @property
    def n_stages(self) -> int:
        return len(self.trees)

    def staged_predict(self, X, stage: int | None = None) -> np.ndarray:
        stage = self.n_stages if stage is None else stage
        if not 0 <= stage <= self.n_stages:
            raise ValueError(f"stage must lie in [0, {self.n_stages}], got {stage}")
        X = _check_matrix(X, self.n_features)
        out = np.full(X.shape[0], self.init)
        for tree in self.trees[:stage]:
            out += self.params.learning_rate * tree.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        return self.staged_predict(X)

    def to_dict(self) -> dict:
        return {
            "kind": "gbm",
            "init": self.init,
            "seed": self.seed,
            "n_features": self.n_features,
            "params": vars(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> GbmModel:
        return cls(init=float(data["init"]), trees=[TreeModel.from_dict(t) for t in data["trees"]],
                   params=GbmParams(**data["params"]), seed=int(data["seed"]),
                   n_features=int(data["n_features"]))


def squared_loss_gradient(y, F) -> np.ndarray:
    """d/dF of 0.5 * (y - F)**2."""
    return np.asarray(F, dtype=float) - np.asarray(y, dtype=float)


def fit_gbm(X, y, params: GbmParams | None = None, seed: int = 0) -> GbmModel:
    params = params or GbmParams()
    X = _check_matrix(X)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot fit boosting on empty data")
    tree_params = TreeParams(max_depth=params.max_depth,
                             min_samples_leaf=params.min_samples_leaf,
                             max_features=params.max_features)
    order = feature_order(X)
    init = float(np.mean(y))
    F = np.full(n, init)
    trees = []
    for stage in range(params.n_stages):
        residual = -squared_loss_gradient(y, F)
        tree = fit_tree(X, residual, tree_params, seed=_tree_rng(seed, stage), order=order)
        # training rows sit in the leaves recorded at fit time
        F = F + params.learning_rate * tree.value[tree.leaf_of_sample]
        trees.append(tree)
    return GbmModel(init, trees, params, seed, d)


def gbm_staged_predict(model: GbmModel, x, stage: int) -> float:
    return float(model.staged_predict(np.asarray(x, dtype=float).reshape(1, -1), stage)[0])


def feature_importance(model: ForestModel | GbmModel) -> dict[int, int]:
    """Split counts per feature index across all trees (F-score)."""
    counts: dict[int, int] = {}
    for tree in model.trees:
        for f in tree.feature[tree.feature >= 0]:
            counts[int(f)] = counts.get(int(f), 0) + 1
    return dict(sorted(counts.items()))

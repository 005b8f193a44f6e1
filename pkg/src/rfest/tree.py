"""Regression tree with variance-reduction splits and learned missing-value routing.

Missing feature values never get their own branch. Every candidate
threshold is scored twice, once with the missing rows sent left and once
sent right, and the better routing is stored with the split. One extra
candidate per feature separates the observed rows (left) from the missing
rows (right); it is stored with an infinite threshold.

Ties are broken by lowest feature index, then lowest threshold, then
missing->left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rfest import _kernels


@dataclass(frozen=True)
class SplitDecision:
    feature: int
    threshold: float
    missing_left: bool
    gain: float

    @property
    def missing_direction(self) -> str:
        return "left" if self.missing_left else "right"


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_leaf: int = 5
    max_features: int | None = None

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1 or None")


@dataclass(frozen=True, eq=False)
class TreeModel:
    """Fitted tree stored as flat node arrays.

    ``feature[k] == -1`` marks a leaf. ``sample_rows`` are the training row
    indices the tree was grown on (with bootstrap repeats) and
    ``leaf_of_sample[j]`` is the leaf holding ``sample_rows[j]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_node_samples: np.ndarray
    sample_rows: np.ndarray
    leaf_of_sample: np.ndarray
    n_features: int
    params: TreeParams

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def internal_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.feature >= 0)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def split(self, node: int) -> SplitDecision | None:
        if self.feature[node] < 0:
            return None
        return SplitDecision(int(self.feature[node]), float(self.threshold[node]),
                             bool(self.missing_left[node]), float(self.gain[node]))

    def leaf_members(self, leaf: int) -> np.ndarray:
        """Training row indices in ``leaf``, repeated by bootstrap multiplicity."""
        return self.sample_rows[self.leaf_of_sample == leaf]

    def apply(self, X) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        return _kernels.apply_tree(X, self.feature, self.threshold,
                                   self.missing_left, self.left, self.right)

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "params": {
                "max_depth": self.params.max_depth,
                "min_samples_leaf": self.params.min_samples_leaf,
                "max_features": self.params.max_features,
            },
            "feature": self.feature.tolist(),
            # JSON has no infinity; None marks the observed-vs-missing split
            "threshold": [None if np.isinf(t) else float(t) for t in self.threshold],
            "missing_left": self.missing_left.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "n_node_samples": self.n_node_samples.tolist(),
            "sample_rows": self.sample_rows.tolist(),
            "leaf_of_sample": self.leaf_of_sample.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> TreeModel:
        thr = np.array([np.inf if t is None else t for t in data["threshold"]], dtype=float)
        return cls(
            feature=np.asarray(data["feature"], dtype=np.int64),
            threshold=thr,
            missing_left=np.asarray(data["missing_left"], dtype=bool),
            left=np.asarray(data["left"], dtype=np.int64),
            right=np.asarray(data["right"], dtype=np.int64),
            value=np.asarray(data["value"], dtype=float),
            gain=np.asarray(data["gain"], dtype=float),
            n_node_samples=np.asarray(data["n_node_samples"], dtype=np.int64),
            sample_rows=np.asarray(data["sample_rows"], dtype=np.int64),
            leaf_of_sample=np.asarray(data["leaf_of_sample"], dtype=np.int64),
            n_features=int(data["n_features"]),
            params=TreeParams(**data["params"]),
        )


def feature_order(X) -> np.ndarray:
    """Per-feature row order (ascending, missing last) for ``fit_tree``."""
    return _kernels.feature_order(_check_matrix(X))


def _check_matrix(X, n_features: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got {X.ndim} dimensions")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def best_split(x, y, min_samples_leaf: int = 1) -> SplitDecision | None:
    """Best split of a single feature column; ``None`` if nothing admissible.

    ``x`` may contain NaN for missing values.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("x and y must have the same length")
    if len(y) < 2:
        return None
    found, thr, mleft, gain = _kernels.best_split_column(x.ravel(), y, min_samples_leaf)
    if not found:
        return None
    return SplitDecision(0, float(thr), bool(mleft), float(gain))


def fit_tree(X, y, params: TreeParams | None = None, sample_rows=None,
             seed: int | np.random.Generator = 0, order=None) -> TreeModel:
    """Grow a regression tree on ``X`` (NaN = missing) and targets ``y``.

    ``sample_rows`` selects (possibly repeated) training rows; by default
    every row once. ``seed`` drives per-node feature subsampling when
    ``params.max_features`` is below the feature count. ``order`` is the
    cached result of ``feature_order(X)`` when many trees share ``X``.
    """
    params = params or TreeParams()
    X = _check_matrix(X)
    y = np.ascontiguousarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on empty data")
    if len(y) != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if np.isnan(y).any():
        raise ValueError("targets must not be missing")
    if sample_rows is None:
        sample_rows = np.arange(X.shape[0])
    sample_rows = np.ascontiguousarray(sample_rows, dtype=np.int64)
    if len(sample_rows) == 0:
        raise ValueError("cannot fit a tree on an empty sample")

    d = X.shape[1]
    m = d if params.max_features is None else min(params.max_features, d)
    if m < d:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        keys = rng.random((2 * len(sample_rows) + 1, d))
    else:
        keys = np.empty((0, d))
    max_depth = -1 if params.max_depth is None else params.max_depth
    if order is None:
        order = feature_order(X)
    out = _kernels.grow_tree(X, y, order, sample_rows, keys, max_depth,
                             params.min_samples_leaf, m)
    return TreeModel(*out[:8], sample_rows=sample_rows, leaf_of_sample=out[8],
                     n_features=d, params=params)


def predict_tree(tree: TreeModel, x) -> tuple[int, float]:
    """Route one feature row; returns (leaf id, leaf value)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_tree takes a single feature row")
    leaf = int(tree.apply(x.reshape(1, -1))[0])
    return leaf, float(tree.value[leaf])

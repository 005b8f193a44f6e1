"""Inductive conformal intervals around a boosted regressor.

The training rows are split once into a proper training set, used to fit
the booster, and a calibration set whose absolute residuals become the
nonconformity scores. For confidence level ``alpha`` the interval
half-width is the ceil(alpha * (n_cal + 1))-th smallest score, or infinity
when that rank exceeds the calibration size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rfest.ensembles import GbmModel, GbmParams, PredictionInterval, check_alpha, fit_gbm
from rfest.tree import _check_matrix


def nonconformity(y, y_hat):
    return np.abs(np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float))


def split_sizes(n: int, split_ratio: float) -> tuple[int, int]:
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    n_proper = int(round(split_ratio * n))
    n_cal = n - n_proper
    if n_proper < 1 or n_cal < 1:
        raise ValueError(
            f"calibration split of {n} rows at ratio {split_ratio} leaves an empty part "
            f"({n_proper} proper / {n_cal} calibration)")
    return n_proper, n_cal


@dataclass(eq=False)
class IcpModel:
    model: GbmModel
    scores: np.ndarray  # ascending
    proper_rows: np.ndarray
    calibration_rows: np.ndarray
    split_ratio: float
    seed: int

    @property
    def n_cal(self) -> int:
        return len(self.scores)

    @property
    def n_features(self) -> int:
        return self.model.n_features

    def quantile(self, alpha: float) -> float:
        check_alpha(alpha)
        # guard against alpha * (n + 1) landing a hair above an integer
        rank = math.ceil(alpha * (self.n_cal + 1) - 1e-9)
        if rank > self.n_cal:
            return math.inf
        return float(self.scores[rank - 1])

    def predict(self, X) -> np.ndarray:
        return self.model.predict(X)

    def interval(self, X, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        q = self.quantile(alpha)
        pred = self.predict(_check_matrix(X, self.n_features))
        return pred - q, pred + q

    def to_dict(self) -> dict:
        return {
            "kind": "icp",
            "split_ratio": self.split_ratio,
            "seed": self.seed,
            "scores": self.scores.tolist(),
            "proper_rows": self.proper_rows.tolist(),
            "calibration_rows": self.calibration_rows.tolist(),
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> IcpModel:
        return cls(model=GbmModel.from_dict(data["model"]),
                   scores=np.asarray(data["scores"], dtype=float),
                   proper_rows=np.asarray(data["proper_rows"], dtype=np.int64),
                   calibration_rows=np.asarray(data["calibration_rows"], dtype=np.int64),
                   split_ratio=float(data["split_ratio"]), seed=int(data["seed"]))


def fit_icp(X, y, params: GbmParams | None = None, split_ratio: float = 0.75,
            seed: int = 0) -> IcpModel:
    X = _check_matrix(X)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 4:
        raise ValueError(f"conformal fitting needs at least 4 rows, got {n}")
    n_proper, _ = split_sizes(n, split_ratio)
    rng = np.random.default_rng([seed, 0xC0F])
    perm = rng.permutation(n)
    proper = np.sort(perm[:n_proper])
    cal = np.sort(perm[n_proper:])
    model = fit_gbm(X[proper], y[proper], params, seed=seed)
    scores = np.sort(nonconformity(y[cal], model.predict(X[cal])))
    return IcpModel(model, scores, proper, cal, split_ratio, seed)


def icp_quantile(model: IcpModel, alpha: float) -> float:
    return model.quantile(alpha)


def icp_interval(model: IcpModel, x, alpha: float) -> PredictionInterval:
    lo, hi = model.interval(np.asarray(x, dtype=float).reshape(1, -1), alpha)
    return PredictionInterval(float(lo[0]), float(hi[0]), alpha)

"""Accuracy and interval metrics, and the cross-validation driver."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rfest import __version__
from rfest.ensembles import PredictionInterval, check_alpha
from rfest.pipeline import ModelConfig, RecoveryModel
from rfest.tabular import Dataset, DataError, FoldPlan

REPORT_LO, REPORT_HI = 0.0, 100.0


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if len(y) != len(y_hat):
        raise ValueError(f"length mismatch: {len(y)} targets vs {len(y_hat)} predictions")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    if len(y) == 0:
        raise ValueError("mae of an empty sample is undefined")
    return math.fsum(np.abs(y - y_hat).tolist()) / len(y)


def r2(y, y_hat) -> float:
    """Coefficient of determination; constant ``y`` is an error."""
    y, y_hat = _pair(y, y_hat)
    if len(y) < 2:
        raise ValueError("r2 needs at least 2 rows")
    mean = math.fsum(y.tolist()) / len(y)
    ss_tot = math.fsum(((y - mean) ** 2).tolist())
    if ss_tot == 0:
        raise ValueError("r2 is undefined for a constant target")
    ss_res = math.fsum(((y - y_hat) ** 2).tolist())
    return 1.0 - ss_res / ss_tot


def _bounds(intervals) -> tuple[np.ndarray, np.ndarray]:
    """Accept a sequence of ``PredictionInterval`` or a ``(lower, upper)`` pair of arrays."""
    if isinstance(intervals, tuple) and len(intervals) == 2 and not isinstance(
            intervals[0], PredictionInterval):
        lo, hi = (np.asarray(b, dtype=float).ravel() for b in intervals)
        if len(lo) != len(hi):
            raise ValueError("lower and upper bounds differ in length")
        return lo, hi
    lo = np.array([iv.lower for iv in intervals], dtype=float)
    hi = np.array([iv.upper for iv in intervals], dtype=float)
    return lo, hi


def coverage(intervals, y) -> float:
    """Fraction of rows with ``lower <= y <= upper`` (closed bounds)."""
    lo, hi = _bounds(intervals)
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != len(lo):
        raise ValueError(f"length mismatch: {len(lo)} intervals vs {len(y)} targets")
    if len(y) == 0:
        raise ValueError("coverage of an empty sample is undefined")
    return int(np.count_nonzero((lo <= y) & (y <= hi))) / len(y)


def mean_width(intervals) -> float:
    lo, hi = _bounds(intervals)
    if len(lo) == 0:
        raise ValueError("mean width of an empty sample is undefined")
    return math.fsum((hi - lo).tolist()) / len(lo)


def clamp_bounds(lo, hi, low: float = REPORT_LO, high: float = REPORT_HI):
    return np.clip(lo, low, high), np.clip(hi, low, high)


def fold_seed(seed: int, fold: int) -> int:
    """Per-fold model seed derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


def _alpha_key(alpha: float) -> str:
    return repr(float(alpha))


@dataclass(eq=False)
class EvaluationReport:
    y_true: np.ndarray
    y_pred: np.ndarray
    fold: np.ndarray
    lower: dict[float, np.ndarray]
    upper: dict[float, np.ndarray]
    config: ModelConfig
    plan: dict
    fold_seeds: list[int]
    curves: list[dict] = field(default_factory=list)
    fold_models: list[str] | None = None
    row_ids: np.ndarray | None = None

    @property
    def alphas(self) -> list[float]:
        return sorted(self.lower)

    @property
    def n(self) -> int:
        return len(self.y_true)

    def metrics(self) -> dict:
        out = {"n": self.n, "mae": mae(self.y_true, self.y_pred)}
        try:
            out["r2"] = r2(self.y_true, self.y_pred)
        except ValueError:
            out["r2"] = None
        for a in self.alphas:
            key = _alpha_key(a)
            out[f"coverage_{key}"] = coverage((self.lower[a], self.upper[a]), self.y_true)
            out[f"mean_width_{key}"] = mean_width((self.lower[a], self.upper[a]))
        return out

    def rows(self) -> list[dict]:
        ids = self.row_ids if self.row_ids is not None else np.arange(self.n)
        out = []
        for i in range(self.n):
            row = {"row": int(ids[i]), "fold": int(self.fold[i]),
                   "y_true": float(self.y_true[i]), "y_pred": float(self.y_pred[i])}
            for a in self.alphas:
                row[f"lower_{_alpha_key(a)}"] = float(self.lower[a][i])
                row[f"upper_{_alpha_key(a)}"] = float(self.upper[a][i])
            out.append(row)
        return out

    def summary(self) -> dict:
        return {
            "software_version": __version__,
            "config": self.config.to_dict(),
            "fold_plan": self.plan,
            "fold_seeds": self.fold_seeds,
            "alphas": self.alphas,
            "metrics": self.metrics(),
            "curves": self.curves,
        }

    def write_rows(self, path) -> None:
        rows = self.rows()
        header = ["row", "fold", "y_true", "y_pred"]
        for a in self.alphas:
            header += [f"lower_{_alpha_key(a)}", f"upper_{_alpha_key(a)}"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(row[h]) if isinstance(row[h], float) else row[h]
                                 for h in header])

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def recompute_metrics(path, alphas: Sequence[float]) -> dict:
    """Metrics recomputed from a per-row CSV written by ``EvaluationReport.write_rows``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    y = np.array([float(r["y_true"]) for r in rows])
    pred = np.array([float(r["y_pred"]) for r in rows])
    out = {"n": len(rows), "mae": mae(y, pred)}
    try:
        out["r2"] = r2(y, pred)
    except ValueError:
        out["r2"] = None
    for a in sorted(alphas):
        key = _alpha_key(a)
        lo = np.array([float(r[f"lower_{key}"]) for r in rows])
        hi = np.array([float(r[f"upper_{key}"]) for r in rows])
        out[f"coverage_{key}"] = coverage((lo, hi), y)
        out[f"mean_width_{key}"] = mean_width((lo, hi))
    return out


def cross_validate(ds: Dataset, config: ModelConfig, plan: FoldPlan,
                   alphas: Sequence[float] = (0.8, 0.9), keep_models: bool = False,
                   row_ids=None) -> EvaluationReport:
    """Fit on each fold's training rows only and predict its held-out rows.

    Reported intervals are clamped to [0, 100]. With ``keep_models`` the
    serialized fitted model of every fold is kept on the report.
    """
    if plan.n != ds.n:
        raise DataError(f"fold plan covers {plan.n} rows but dataset has {ds.n}")
    if np.isnan(ds.y).any():
        raise DataError("cross-validation needs a target on every row; drop missing targets first")
    alphas = sorted(float(a) for a in alphas)
    for a in alphas:
        check_alpha(a)
    n = ds.n
    y_pred = np.full(n, np.nan)
    lower = {a: np.full(n, np.nan) for a in alphas}
    upper = {a: np.full(n, np.nan) for a in alphas}
    seeds, curves, models = [], [], []
    for fold, train_idx, test_idx in plan.splits():
        seed = fold_seed(config.seed, fold)
        seeds.append(seed)
        if len(test_idx) == 0:
            continue
        try:
            model = RecoveryModel.fit(ds.take(train_idx), config.with_seed(seed))
        except ValueError as exc:
            raise DataError(f"fold {fold} ({len(train_idx)} training rows): {exc}") from exc
        point, bounds = model.predict_intervals(ds.take(test_idx), alphas)
        y_pred[test_idx] = point
        for a in alphas:
            lower[a][test_idx], upper[a][test_idx] = clamp_bounds(*bounds[a])
        if model.curves:
            curves.append({"fold": fold, **{k: list(m.params) for k, m in
                                           sorted(model.curves.items())}})
        if keep_models:
            models.append(model.to_json())
    return EvaluationReport(
        y_true=np.asarray(ds.y, dtype=float).copy(), y_pred=y_pred,
        fold=plan.assignment.copy(), lower=lower, upper=upper, config=config,
        plan=plan.describe(), fold_seeds=seeds, curves=curves,
        fold_models=models if keep_models else None,
        row_ids=None if row_ids is None else np.asarray(row_ids))

"""General production curves and curve-based recovery factor estimates.

A production curve ``f(dt, V)`` maps years since first production (and
optionally original oil in place ``V``) to the produced share of the
recoverable oil, so ``rf ~ P / (V * f)``. Two families are supported:

    hyperbolic   f = dt / (dt + w)
    exponential  f = 1 - exp(-dt / w)

with either a single shared ``w`` or ``w = w1 * sqrt(V) + w0``. Both give
``f(0) = 0`` and ``f -> 1`` as ``dt`` grows. One curve is fitted to all
training reservoirs by minimizing the mean squared error of the implied
recovery factor.

Units: recovery factors are fractions here and percent in datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rfest.tabular import NUMERIC, ColumnSchema, Dataset, DataError

FAMILIES = ("exp_simple", "hyp_simple", "exp_V", "hyp_V")
MIN_DT = 1.0
MIN_W = 1e-6
MAX_ITER = 10_000
REL_TOL = 1e-9
MAX_HALVINGS = 40

STACK_COLUMNS = ("pv_ratio", "rf_exp", "rf_hyp")


class CurveFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurveRecord:
    delta_t: float
    V: float
    P: float
    rf: float

    def __post_init__(self):
        if self.delta_t < 0:
            raise ValueError(f"delta_t must be >= 0, got {self.delta_t}")
        if self.V <= 0:
            raise ValueError(f"V must be > 0, got {self.V}")
        if not 0 <= self.P <= self.V:
            raise ValueError(f"P must lie in [0, V], got P={self.P}, V={self.V}")


def _is_hyp(family: str) -> bool:
    return family.startswith("hyp")


def _uses_v(family: str) -> bool:
    return family.endswith("_V")


@dataclass(frozen=True)
class CurveModel:
    family: str
    params: tuple[float, ...]  # (w,) or (w0, w1)
    loss: float = math.nan
    n_iter: int = 0
    loss_history: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown curve family {self.family!r}; choose from {FAMILIES}")
        if len(self.params) != (2 if _uses_v(self.family) else 1):
            raise ValueError(f"{self.family} takes {2 if _uses_v(self.family) else 1} parameters")

    def effective_w(self, V=None) -> np.ndarray:
        if _uses_v(self.family):
            if V is None:
                raise ValueError(f"{self.family} needs V")
            w0, w1 = self.params
            return w1 * np.sqrt(np.asarray(V, dtype=float)) + w0
        return np.full(np.shape(V) if V is not None else (), float(self.params[0]))

    def __call__(self, delta_t, V=None):
        return eval_curve(self, delta_t, V)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params), "loss": self.loss,
                "n_iter": self.n_iter}

    @classmethod
    def from_dict(cls, data: dict) -> CurveModel:
        return cls(data["family"], tuple(float(p) for p in data["params"]),
                   float(data["loss"]), int(data["n_iter"]))


def _shape(family: str, dt, w):
    if _is_hyp(family):
        return dt / (dt + w)
    return -np.expm1(-dt / w)


def eval_curve(model: CurveModel, delta_t, V=None):
    """Produced share of recoverable oil after ``delta_t`` years."""
    dt = np.asarray(delta_t, dtype=float)
    if np.any(dt < 0):
        raise ValueError("delta_t must be >= 0")
    if _uses_v(model.family):
        if V is None or np.any(np.asarray(V, dtype=float) <= 0):
            raise ValueError("V must be > 0 for V-dependent families")
    w = model.effective_w(V)
    if np.any(w <= 0):
        raise ValueError(f"non-positive effective w for {model.family} at the given V")
    out = _shape(model.family, dt, w)
    return float(out) if np.ndim(out) == 0 else out


def _implied_rf(family, dt, V, P, w):
    return P / (V * _shape(family, dt, w))


def _drf_dw(family, dt, V, P, w):
    """Derivative of P / (V f) with respect to the effective w."""
    if _is_hyp(family):
        return P / (V * dt)
    f = -np.expm1(-dt / w)
    return P / (V * f * f) * np.exp(-dt / w) * dt / (w * w)


class _Objective:
    """Mean squared error of the implied recovery factor.

    V-dependent families are optimized in ``(w0, w1 * s)`` with
    ``s = median(sqrt(V))`` so both coordinates act on the same scale.
    """

    def __init__(self, family, dt, V, P, rf):
        self.family = family
        self.dt, self.V, self.P, self.rf = dt, V, P, rf
        self.sqrt_v = np.sqrt(V)
        self.scale = float(np.median(self.sqrt_v)) if _uses_v(family) else 1.0
        self.sv_min = float(self.sqrt_v.min())
        self.sv_max = float(self.sqrt_v.max())

    def to_params(self, theta) -> tuple[float, ...]:
        if _uses_v(self.family):
            return (float(theta[0]), float(theta[1] / self.scale))
        return (float(theta[0]),)

    def from_params(self, params) -> np.ndarray:
        if _uses_v(self.family):
            return np.array([params[0], params[1] * self.scale])
        return np.array([params[0]], dtype=float)

    def w(self, theta):
        if _uses_v(self.family):
            return theta[0] + theta[1] * self.sqrt_v / self.scale
        return np.full_like(self.dt, theta[0])

    def loss(self, theta) -> float:
        w = self.w(theta)
        if np.any(w <= 0):
            return math.inf
        r = _implied_rf(self.family, self.dt, self.V, self.P, w) - self.rf
        return float(np.mean(r * r))

    def grad(self, theta) -> np.ndarray:
        w = self.w(theta)
        r = _implied_rf(self.family, self.dt, self.V, self.P, w) - self.rf
        g = 2.0 * r * _drf_dw(self.family, self.dt, self.V, self.P, w) / len(r)
        if _uses_v(self.family):
            return np.array([g.sum(), (g * self.sqrt_v).sum() / self.scale])
        return np.array([g.sum()])

    def project(self, theta) -> np.ndarray:
        theta = theta.copy()
        if _uses_v(self.family):
            a = theta[1] / self.scale
            theta[0] = max(theta[0], MIN_W - a * self.sv_min, MIN_W - a * self.sv_max)
        else:
            theta[0] = max(theta[0], MIN_W)
        return theta


def curve_loss(family: str, params, dt, V, P, rf) -> float:
    obj = _Objective(family, *map(lambda a: np.asarray(a, dtype=float), (dt, V, P, rf)))
    return obj.loss(obj.from_params(params))


def curve_loss_grad(family: str, params, dt, V, P, rf) -> np.ndarray:
    """Analytic gradient of the curve loss in the natural parameters (w,) / (w0, w1)."""
    obj = _Objective(family, *map(lambda a: np.asarray(a, dtype=float), (dt, V, P, rf)))
    g = obj.grad(obj.from_params(params))
    if _uses_v(family):
        return np.array([g[0], g[1] * obj.scale])
    return g


def _usable(dt, V, P, rf):
    ok = np.isfinite(dt) & np.isfinite(V) & np.isfinite(P) & np.isfinite(rf)
    ok &= (dt >= MIN_DT) & (V > 0)
    return ok


def fit_curve_arrays(dt, V, P, rf, family: str) -> CurveModel:
    """Fit one curve family by projected gradient descent with step halving.

    Each iteration tries twice the previous accepted step (1.0 at the
    start) and halves it until the loss strictly decreases, so the loss
    sequence is monotone. Records with ``dt < 1`` are ignored.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown curve family {family!r}; choose from {FAMILIES}")
    dt, V, P, rf = (np.asarray(a, dtype=float) for a in (dt, V, P, rf))
    keep = _usable(dt, V, P, rf)
    if keep.sum() < 3:
        raise CurveFitError(f"{family}: need at least 3 records with delta_t >= {MIN_DT}, "
                            f"got {int(keep.sum())}")
    obj = _Objective(family, dt[keep], V[keep], P[keep], rf[keep])
    med_dt = float(np.median(obj.dt))
    init = (0.0, med_dt / float(np.median(obj.sqrt_v))) if _uses_v(family) else (med_dt,)
    theta = obj.project(obj.from_params(init))
    loss = obj.loss(theta)
    if not math.isfinite(loss):
        raise CurveFitError(f"{family}: loss is not finite at the initial point")
    history = [loss]
    step = 1.0
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        g = obj.grad(theta)
        if not np.all(np.isfinite(g)):
            raise CurveFitError(f"{family}: gradient diverged at iteration {n_iter}")
        if not np.any(g):
            break
        step *= 2.0
        for _ in range(MAX_HALVINGS + 1):
            cand = obj.project(theta - step * g)
            new_loss = obj.loss(cand)
            if new_loss < loss:
                break
            step *= 0.5
        else:
            break
        rel = (loss - new_loss) / loss if loss > 0 else 0.0
        theta, loss = cand, new_loss
        history.append(loss)
        if rel < REL_TOL or loss == 0.0:
            break
    return CurveModel(family, obj.to_params(theta), loss, n_iter, tuple(history))


def fit_curve(records: Sequence[CurveRecord], family: str) -> CurveModel:
    arr = np.array([(r.delta_t, r.V, r.P, r.rf) for r in records], dtype=float).reshape(-1, 4)
    return fit_curve_arrays(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], family)


def rf_estimate(model: CurveModel, P: float, delta_t: float, V: float) -> float:
    """Recovery factor (fraction) implied by cumulative production ``P``."""
    if delta_t < MIN_DT:
        raise ValueError(f"delta_t must be >= {MIN_DT} to invert the curve, got {delta_t}")
    if V <= 0:
        raise ValueError(f"V must be > 0, got {V}")
    return float(estimate_rf(model, P, delta_t, V))


def estimate_rf(model: CurveModel, P, delta_t, V) -> np.ndarray:
    """Vectorized estimate; NaN where inputs are missing or ``delta_t < 1``.

    Clamped to ``[P/V, 1]``: production already observed is a hard lower
    bound on the recovery factor.
    """
    P, dt, V = (np.asarray(a, dtype=float) for a in (P, delta_t, V))
    P, dt, V = np.broadcast_arrays(P, dt, V)
    out = np.full(P.shape, np.nan)
    ok = np.isfinite(P) & np.isfinite(dt) & np.isfinite(V) & (dt >= MIN_DT) & (V > 0)
    if ok.any():
        w = model.effective_w(V[ok]) if _uses_v(model.family) else float(model.params[0])
        w = np.broadcast_to(w, P[ok].shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = _implied_rf(model.family, dt[ok], V[ok], P[ok], w)
        lower = P[ok] / V[ok]
        est = np.clip(np.where(w > 0, raw, np.nan), lower, 1.0)
        out[ok] = np.maximum(est, lower)
    return out


@dataclass(frozen=True)
class CurveColumns:
    delta_t: str = "delta_t"
    ooip: str = "ooip"
    cum_oil: str = "cum_oil"


def fit_stack_curves(train: Dataset, cols: CurveColumns = CurveColumns()) -> dict[str, CurveModel]:
    y = train.y / 100.0
    models = {}
    for family in ("exp_V", "hyp_V"):
        try:
            models[family] = fit_curve_arrays(train[cols.delta_t], train[cols.ooip],
                                              train[cols.cum_oil], y, family)
        except (CurveFitError, KeyError) as exc:
            raise CurveFitError(f"stacking curve {family} failed on {train.n} training rows: "
                                f"{exc}") from exc
    return models


def stack_columns(ds: Dataset, models: dict[str, CurveModel],
                  cols: CurveColumns = CurveColumns()) -> Dataset:
    """Append P/V, exponential and hyperbolic curve estimates (all percent)."""
    for name in (cols.delta_t, cols.ooip, cols.cum_oil):
        if name not in ds:
            raise DataError(f"stacking needs column {name!r}")
    P, V, dt = ds[cols.cum_oil], ds[cols.ooip], ds[cols.delta_t]
    complete = np.isfinite(P) & np.isfinite(V) & np.isfinite(dt) & (V > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        pv = np.where(complete, 100.0 * P / V, np.nan)
    ds = ds.with_column(ColumnSchema("pv_ratio", NUMERIC, unit_note="P/V, percent"), pv)
    ds = ds.with_column(ColumnSchema("rf_exp", NUMERIC, unit_note="exp_V curve estimate, percent"),
                        np.where(complete, 100.0 * estimate_rf(models["exp_V"], P, dt, V), np.nan))
    ds = ds.with_column(ColumnSchema("rf_hyp", NUMERIC, unit_note="hyp_V curve estimate, percent"),
                        np.where(complete, 100.0 * estimate_rf(models["hyp_V"], P, dt, V), np.nan))
    return ds


def augment_features(train: Dataset, test: Dataset, cols: CurveColumns = CurveColumns()
                     ) -> tuple[Dataset, Dataset, dict[str, CurveModel]]:
    """Fit the stacking curves on ``train`` only and append their features to both sets."""
    models = fit_stack_curves(train, cols)
    return stack_columns(train, models, cols), stack_columns(test, models, cols), models


def curve_table(model: CurveModel, dt_grid, V_values=(None,)) -> list[dict]:
    rows = []
    for V in V_values:
        f = eval_curve(model, dt_grid, V)
        for t, val in zip(np.atleast_1d(dt_grid), np.atleast_1d(f)):
            rows.append({"family": model.family, "V": "" if V is None else V,
                         "delta_t": float(t), "f": float(val)})
    return rows

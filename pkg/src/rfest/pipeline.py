"""End-to-end recovery factor model: encoding, curve stacking, interval estimator.

A fitted ``RecoveryModel`` holds everything learned from its training rows
(target encoders, stacking curves, the estimator) and serializes to a
versioned JSON model file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from rfest import __version__
from rfest.conformal import IcpModel, fit_icp
from rfest.curves import STACK_COLUMNS, CurveColumns, CurveModel, fit_stack_curves, stack_columns
from rfest.ensembles import (ForestModel, ForestParams, GbmParams, check_alpha, fit_forest,
                             weighted_quantile)
from rfest.tabular import (CATEGORICAL, TARGET, ColumnSchema, Dataset, DataError, TargetEncoder,
                           apply_target_encoder, fit_target_encoder, schema_hash)

MODEL_FORMAT = "rfest-model"
FORMAT_VERSION = "1.0"
MODELS = ("qrf", "gbm_icp", "mean")


class ModelFileError(RuntimeError):
    pass


class SchemaMismatch(DataError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    model: str = "gbm_icp"
    forest: ForestParams = field(default_factory=ForestParams)
    gbm: GbmParams = field(default_factory=GbmParams)
    split_ratio: float = 0.75
    stacking: bool = False
    curve_columns: CurveColumns = field(default_factory=CurveColumns)
    features: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features) if self.features is not None else None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        if "forest" in data:
            data["forest"] = ForestParams(**data["forest"])
        if "gbm" in data:
            data["gbm"] = GbmParams(**data["gbm"])
        if "curve_columns" in data:
            data["curve_columns"] = CurveColumns(**data["curve_columns"])
        if data.get("features") is not None:
            data["features"] = tuple(data["features"])
        return cls(**data)

    def with_seed(self, seed: int) -> ModelConfig:
        return replace(self, seed=int(seed))


@dataclass(eq=False)
class MeanModel:
    """Baseline: training mean, intervals from training target quantiles."""

    y_train: np.ndarray
    n_features: int

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], float(np.mean(self.y_train)))

    def interval(self, X, alpha: float):
        check_alpha(alpha)
        w = np.full(len(self.y_train), 1.0 / len(self.y_train))
        lo = weighted_quantile(self.y_train, w, (1 - alpha) / 2)
        hi = weighted_quantile(self.y_train, w, (1 + alpha) / 2)
        n = np.asarray(X).shape[0]
        return np.full(n, lo), np.full(n, hi)

    def to_dict(self) -> dict:
        return {"kind": "mean", "y_train": self.y_train.tolist(), "n_features": self.n_features}

    @classmethod
    def from_dict(cls, data: dict) -> MeanModel:
        return cls(np.asarray(data["y_train"], dtype=float), int(data["n_features"]))


def _estimator_from_dict(data: dict):
    kind = data["kind"]
    if kind == "forest":
        return ForestModel.from_dict(data)
    if kind == "icp":
        return IcpModel.from_dict(data)
    if kind == "mean":
        return MeanModel.from_dict(data)
    raise ModelFileError(f"unknown estimator kind {kind!r}")


def _input_columns(schema: Sequence[ColumnSchema], config: ModelConfig) -> list[ColumnSchema]:
    features = [c for c in schema if c.role == "feature"]
    if config.features is not None:
        by_name = {c.name: c for c in schema}
        missing = [f for f in config.features if f not in by_name]
        if missing:
            raise DataError(f"configured feature columns not in dataset: {missing}")
        features = [by_name[f] for f in config.features]
    return features


@dataclass(eq=False)
class RecoveryModel:
    config: ModelConfig
    input_schema: tuple[ColumnSchema, ...]
    encoders: list[TargetEncoder]
    curves: dict[str, CurveModel]
    feature_names: list[str]
    estimator: ForestModel | IcpModel | MeanModel

    @classmethod
    def fit(cls, train: Dataset, config: ModelConfig) -> RecoveryModel:
        if train.n == 0:
            raise DataError("no training rows")
        if np.isnan(train.y).any():
            raise DataError("training rows must all have a target")
        inputs = _input_columns(train.schema, config)
        encoders = [fit_target_encoder(train, c.name) for c in inputs if c.kind == CATEGORICAL]
        curves = fit_stack_curves(train, config.curve_columns) if config.stacking else {}
        model = cls(config, tuple(inputs) + (train.spec(train.target_name),), encoders, curves,
                    [], None)
        model.feature_names = [c.name for c in inputs] + (list(STACK_COLUMNS) if curves else [])
        X = model.transform(train)
        y = np.asarray(train.y, dtype=float)
        if config.model == "qrf":
            model.estimator = fit_forest(X, y, config.forest, seed=config.seed)
        elif config.model == "gbm_icp":
            model.estimator = fit_icp(X, y, config.gbm, config.split_ratio, seed=config.seed)
        else:
            model.estimator = MeanModel(y.copy(), X.shape[1])
        return model

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.input_schema)

    def check_schema(self, ds: Dataset) -> None:
        drifted = []
        for col in self.input_schema:
            if col.role == TARGET:
                continue
            if col.name not in ds:
                drifted.append(f"{col.name} (absent)")
            elif ds.spec(col.name).kind != col.kind:
                drifted.append(f"{col.name} (kind {ds.spec(col.name).kind}, "
                               f"model expects {col.kind})")
        if drifted:
            raise SchemaMismatch("dataset does not match the model schema: " + ", ".join(drifted))

    def transform(self, ds: Dataset) -> np.ndarray:
        self.check_schema(ds)
        for enc in self.encoders:
            ds = apply_target_encoder(ds, enc)
        if self.curves:
            ds = stack_columns(ds, self.curves, self.config.curve_columns)
        return ds.matrix(self.feature_names)

    def predict(self, ds: Dataset) -> np.ndarray:
        return self.estimator.predict(self.transform(ds))

    def predict_intervals(self, ds: Dataset, alphas: Sequence[float]):
        """Point predictions and raw (unclamped) bounds per confidence level."""
        X = self.transform(ds)
        if X.shape[0] == 0:
            empty = np.empty(0)
            return empty, {a: (empty, empty) for a in alphas}
        point = self.estimator.predict(X)
        return point, {a: self.estimator.interval(X, a) for a in alphas}

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": FORMAT_VERSION,
            "software_version": __version__,
            "schema_hash": self.schema_hash,
            "input_schema": [c.to_dict() for c in self.input_schema],
            "config": self.config.to_dict(),
            "feature_names": self.feature_names,
            "encoders": [e.to_dict() for e in self.encoders],
            "curves": {k: v.to_dict() for k, v in sorted(self.curves.items())},
            "estimator": self.estimator.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, data: dict) -> RecoveryModel:
        if data.get("format") != MODEL_FORMAT:
            raise ModelFileError("not an rfest model file")
        version = str(data.get("format_version", ""))
        major = int(version.split(".")[0]) if version.split(".")[0].isdigit() else -1
        supported = int(FORMAT_VERSION.split(".")[0])
        if major < 0:
            raise ModelFileError(f"model file has unreadable format version {version!r}")
        if major > supported:
            raise ModelFileError(f"model file format {version} is newer than supported "
                                 f"{FORMAT_VERSION}; upgrade rfest to read it")
        schema = tuple(ColumnSchema(**c) for c in data["input_schema"])
        if schema_hash(schema) != data["schema_hash"]:
            raise ModelFileError("model file schema hash does not match its schema")
        return cls(
            config=ModelConfig.from_dict(data["config"]),
            input_schema=schema,
            encoders=[TargetEncoder.from_dict(e) for e in data["encoders"]],
            curves={k: CurveModel.from_dict(v) for k, v in data["curves"].items()},
            feature_names=list(data["feature_names"]),
            estimator=_estimator_from_dict(data["estimator"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> RecoveryModel:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

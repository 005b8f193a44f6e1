import json

import numpy as np
import pytest

from rfest.ensembles import ForestParams, GbmParams
from rfest.pipeline import (FORMAT_VERSION, MeanModel, ModelConfig, ModelFileError,
                            RecoveryModel, SchemaMismatch)
from rfest.synth import POST, PRE, ScenarioConfig, generate
from rfest.tabular import CATEGORICAL, NUMERIC, ColumnSchema, Dataset, DataError


@pytest.fixture(scope="module")
def pre():
    return generate(ScenarioConfig(PRE, n=120, missing_rate=0.05, seed=1))


@pytest.fixture(scope="module", params=["gbm_icp", "qrf", "mean"])
def fitted(request, pre):
    cfg = ModelConfig(model=request.param, gbm=GbmParams(n_stages=30),
                      forest=ForestParams(n_trees=15), seed=2)
    return RecoveryModel.fit(pre, cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown model"):
        ModelConfig(model="svm")


def test_config_round_trip():
    cfg = ModelConfig(model="qrf", forest=ForestParams(n_trees=7), stacking=True,
                      features=("a", "b"), seed=9)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_predictions_finite_on_training_rows(fitted, pre):
    point, bounds = fitted.predict_intervals(pre, (0.8, 0.9))
    assert point.shape == (pre.n,) and np.isfinite(point).all()
    lo8, hi8 = bounds[0.8]
    lo9, hi9 = bounds[0.9]
    assert (lo9 <= lo8).all() and (lo8 <= hi8).all() and (hi8 <= hi9).all()


def test_round_trip(fitted, pre, tmp_path):
    path = tmp_path / "m.json"
    fitted.save(path)
    back = RecoveryModel.load(path)
    np.testing.assert_array_equal(back.predict(pre), fitted.predict(pre))
    assert back.to_json() == fitted.to_json()


def test_all_missing_row_still_predicts(fitted, pre):
    cols = {}
    for c in pre.schema:
        if c.role == "feature":
            cols[c.name] = [None] if c.kind == CATEGORICAL else [np.nan]
        else:
            cols[c.name] = pre[c.name][:1]
    probe = Dataset(pre.schema, cols)
    assert np.isfinite(fitted.predict(probe)).all()


def test_empty_input(fitted, pre):
    point, bounds = fitted.predict_intervals(pre.take([]), (0.8,))
    assert point.shape == (0,) and bounds[0.8][0].shape == (0,)


def test_unseen_category_uses_fallback(pre):
    model = RecoveryModel.fit(pre, ModelConfig(model="mean"))
    enc = model.encoders[0]
    cols = {n: pre[n][:1] for n in pre.names}
    cols["lithology"] = np.array(["volcanic"], dtype=object)
    X = model.transform(Dataset(pre.schema, cols))
    assert X[0, model.feature_names.index("lithology")] == enc.fallback


def test_schema_mismatch_names_columns(pre):
    model = RecoveryModel.fit(pre, ModelConfig(model="mean"))
    schema = tuple(ColumnSchema(c.name, CATEGORICAL, c.role) if c.name == "porosity" else c
                   for c in pre.schema if c.name != "depth")
    cols = {n: (pre[n].astype(str).astype(object) if n == "porosity" else pre[n])
            for n in pre.names if n != "depth"}
    with pytest.raises(SchemaMismatch, match=r"porosity \(kind categorical.*depth \(absent\)"):
        model.predict(Dataset(schema, cols))


def test_extra_columns_are_ignored(pre):
    model = RecoveryModel.fit(pre, ModelConfig(model="mean"))
    wider = pre.with_column(ColumnSchema("extra", NUMERIC), np.zeros(pre.n))
    np.testing.assert_array_equal(model.predict(wider), model.predict(pre))


def test_feature_subset(pre):
    cfg = ModelConfig(model="gbm_icp", gbm=GbmParams(n_stages=5), features=("porosity", "depth"))
    model = RecoveryModel.fit(pre, cfg)
    assert model.feature_names == ["porosity", "depth"]
    with pytest.raises(DataError):
        RecoveryModel.fit(pre, ModelConfig(features=("nope",)))


def test_stacking_adds_features():
    post = generate(ScenarioConfig(POST, n=150, seed=0))
    model = RecoveryModel.fit(post, ModelConfig(model="gbm_icp", gbm=GbmParams(n_stages=10),
                                                stacking=True))
    assert model.feature_names[-3:] == ["pv_ratio", "rf_exp", "rf_hyp"]
    assert set(model.curves) == {"exp_V", "hyp_V"}
    back = RecoveryModel.from_dict(json.loads(model.to_json()))
    np.testing.assert_array_equal(back.predict(post), model.predict(post))


def test_fit_errors(pre):
    with pytest.raises(DataError):
        RecoveryModel.fit(pre.take([]), ModelConfig())
    cols = {n: pre[n] for n in pre.names}
    y = pre.y.copy()
    y[3] = np.nan
    cols["rf"] = y
    with pytest.raises(DataError):
        RecoveryModel.fit(Dataset(pre.schema, cols), ModelConfig())


class TestModelFile:
    def _data(self, pre):
        return json.loads(RecoveryModel.fit(pre, ModelConfig(model="mean")).to_json())

    def test_newer_major_version(self, pre):
        data = self._data(pre)
        data["format_version"] = "2.0"
        with pytest.raises(ModelFileError, match="newer"):
            RecoveryModel.from_dict(data)

    def test_newer_minor_version_loads(self, pre):
        data = self._data(pre)
        data["format_version"] = FORMAT_VERSION.split(".")[0] + ".9"
        RecoveryModel.from_dict(data)

    def test_wrong_format(self, pre):
        data = self._data(pre)
        data["format"] = "other"
        with pytest.raises(ModelFileError):
            RecoveryModel.from_dict(data)

    def test_tampered_schema(self, pre):
        data = self._data(pre)
        data["input_schema"][0]["kind"] = CATEGORICAL
        with pytest.raises(ModelFileError, match="hash"):
            RecoveryModel.from_dict(data)

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(ModelFileError):
            RecoveryModel.load(path)


def test_mean_model():
    m = MeanModel(np.arange(1.0, 11.0), 2)
    np.testing.assert_array_equal(m.predict(np.zeros((3, 2))), 5.5)
    lo, hi = m.interval(np.zeros((1, 2)), 0.8)
    assert (lo[0], hi[0]) == (1.0, 9.0)

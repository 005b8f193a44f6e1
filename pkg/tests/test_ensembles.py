import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfest.ensembles import (ForestModel, ForestParams, GbmModel, GbmParams, PredictionInterval,
                             feature_importance, fit_forest, fit_gbm, forest_predict_mean,
                             gbm_staged_predict, qrf_interval, qrf_quantile, qrf_weights,
                             squared_loss_gradient, weighted_quantile)
from rfest.tree import TreeParams, fit_tree


@pytest.fixture(scope="module")
def noisy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(120, 4))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = np.nan_to_num(X[:, 0]) * 3 + rng.normal(size=120)
    return X, y


@pytest.fixture(scope="module")
def forest(noisy):
    X, y = noisy
    return fit_forest(X, y, ForestParams(n_trees=25, min_samples_leaf=3), seed=1)


class TestForest:
    def test_single_tree_forest_equals_tree(self):
        X = np.arange(8.0).reshape(-1, 1)
        y = np.array([0, 0, 1, 1, 5, 5, 6, 6.0])
        f = fit_forest(X, y, ForestParams(n_trees=1, min_samples_leaf=1), seed=0)
        np.testing.assert_array_equal(f.predict(X), f.trees[0].predict(X))

    def test_constant_target(self):
        X = np.random.default_rng(1).normal(size=(20, 2))
        f = fit_forest(X, np.full(20, 42.0), ForestParams(n_trees=5), seed=0)
        np.testing.assert_array_equal(f.predict(X), 42.0)

    def test_seed_determinism(self, noisy, forest):
        X, y = noisy
        again = fit_forest(X, y, ForestParams(n_trees=25, min_samples_leaf=3), seed=1)
        np.testing.assert_array_equal(again.predict(X), forest.predict(X))

    def test_mean_of_trees(self, noisy, forest):
        X, _ = noisy
        x = X[7]
        per_tree = [t.predict(x.reshape(1, -1))[0] for t in forest.trees]
        assert forest_predict_mean(forest, x) == pytest.approx(np.mean(per_tree), abs=1e-12)

    def test_bootstrap_samples(self, forest):
        for tree in forest.trees:
            assert len(tree.sample_rows) == 120
            assert tree.n_node_samples[tree.leaves].sum() == 120

    def test_weights_sum_to_one(self, noisy, forest):
        X, _ = noisy
        probe = np.vstack([X[:10], np.full((1, 4), np.nan)])
        W = forest.weights(probe)
        assert (W >= 0).all()
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)

    def test_weights_by_hand(self):
        # one tree, depth 1: x=0 lands in the leaf holding rows {0, 1}
        X = np.array([[0.0], [0.0], [5.0], [5.0], [5.0]])
        y = np.array([1.0, 2.0, 9.0, 9.0, 8.0])
        f = fit_forest(X, y, ForestParams(n_trees=1, min_samples_leaf=1, max_depth=1), seed=3)
        tree = f.trees[0]
        leaf = tree.apply([[0.0]])[0]
        rows = tree.leaf_members(leaf)
        expected = np.bincount(rows, minlength=5) / len(rows)
        np.testing.assert_allclose(qrf_weights(f, [0.0]), expected, atol=1e-15)

    def test_single_leaf_gives_uniform_weights(self):
        X = np.zeros((4, 1))
        f = fit_forest(X, [1.0, 2, 3, 4], ForestParams(n_trees=1, min_samples_leaf=1), seed=0)
        rows = f.trees[0].sample_rows
        np.testing.assert_allclose(qrf_weights(f, [0.0]), np.bincount(rows, minlength=4) / 4)

    def test_quantile_monotone(self, noisy, forest):
        X, _ = noisy
        qs = np.linspace(0.05, 0.95, 10)
        Q = forest.quantiles(X[:15], qs)
        assert (np.diff(Q, axis=1) >= 0).all()

    def test_quantile_matches_weighted_cdf(self, noisy, forest):
        X, y = noisy
        w = qrf_weights(forest, X[3])
        for q in (0.1, 0.5, 0.9):
            assert qrf_quantile(forest, X[3], q) == weighted_quantile(y, w, q)

    def test_interval_nesting(self, noisy, forest):
        X, _ = noisy
        lo8, hi8 = forest.interval(X, 0.8)
        lo9, hi9 = forest.interval(X, 0.9)
        assert (lo9 <= lo8).all() and (hi8 <= hi9).all() and (lo8 <= hi8).all()

    def test_interval_levels(self, noisy, forest):
        X, _ = noisy
        iv = qrf_interval(forest, X[0], 0.7)
        Q = forest.quantiles(X[:1], [0.15, 0.85])[0]
        assert (iv.lower, iv.upper) == (Q[0], Q[1])

    def test_bad_alpha(self, noisy, forest):
        with pytest.raises(ValueError):
            forest.interval(noisy[0][:1], 1.0)
        with pytest.raises(ValueError):
            forest.quantiles(noisy[0][:1], [0.0])

    def test_arity_mismatch(self, forest):
        with pytest.raises(ValueError):
            forest.predict(np.zeros((1, 3)))

    def test_round_trip(self, noisy, forest):
        X, _ = noisy
        f2 = ForestModel.from_dict(forest.to_dict())
        np.testing.assert_array_equal(f2.predict(X), forest.predict(X))
        np.testing.assert_array_equal(f2.interval(X, 0.8)[0], forest.interval(X, 0.8)[0])


class TestWeightedQuantile:
    def test_uniform_median(self):
        assert weighted_quantile([1, 2, 3, 4], np.full(4, 0.25), 0.5) == 2

    def test_upper_tail(self):
        assert weighted_quantile([1, 2, 3, 4], np.full(4, 0.25), 0.95) == 4

    def test_percent_grid(self):
        v = np.arange(1, 101.0)
        w = np.full(100, 0.01)
        assert weighted_quantile(v, w, 0.05) == 5
        assert weighted_quantile(v, w, 0.95) == 95

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(0.01, 0.99),
           st.floats(0.01, 0.99))
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_q(self, values, q1, q2):
        w = np.full(len(values), 1.0 / len(values))
        lo, hi = sorted((q1, q2))
        assert weighted_quantile(values, w, lo) <= weighted_quantile(values, w, hi)


class TestPredictionInterval:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            PredictionInterval(2.0, 1.0, 0.8)

    def test_clamp(self):
        iv = PredictionInterval(-5.0, 130.0, 0.9).clamp()
        assert (iv.lower, iv.upper) == (0.0, 100.0)
        assert PredictionInterval(-np.inf, np.inf, 0.9).clamp().width == 100.0

    def test_closed(self):
        assert PredictionInterval(3.0, 3.0, 0.8).contains(3.0)


class TestGbm:
    def test_hand_trace(self):
        m = fit_gbm([[1.0], [2.0]], [3.0, 5.0],
                    GbmParams(n_stages=1, learning_rate=1.0, max_depth=1, min_samples_leaf=1))
        assert m.init == 4.0
        np.testing.assert_allclose(m.predict([[1.0], [2.0]]), [3.0, 5.0], atol=1e-15)

    def test_zero_stages(self):
        m = fit_gbm([[1.0], [2.0]], [3.0, 5.0], GbmParams(n_stages=0))
        np.testing.assert_array_equal(m.predict([[0.0], [9.0]]), 4.0)

    def test_invalid_learning_rate(self):
        with pytest.raises(ValueError):
            GbmParams(learning_rate=0.0)
        with pytest.raises(ValueError):
            GbmParams(learning_rate=1.5)

    def test_staged_consistency(self, noisy):
        X, y = noisy
        m = fit_gbm(X, y, GbmParams(n_stages=20), seed=2)
        assert gbm_staged_predict(m, X[0], 0) == m.init
        np.testing.assert_array_equal(m.staged_predict(X, 20), m.predict(X))
        with pytest.raises(ValueError):
            m.staged_predict(X, 21)
        # recompute stage 10 from serialized trees
        data = m.to_dict()
        manual = np.full(len(X), data["init"])
        for t in GbmModel.from_dict(data).trees[:10]:
            manual += m.params.learning_rate * t.predict(X)
        np.testing.assert_allclose(m.staged_predict(X, 10), manual, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_training_mse_non_increasing(self, seed):
        rng = np.random.default_rng([seed, 9])
        n, d = int(rng.integers(10, 80)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, d))
        X[rng.random(X.shape) < 0.1] = np.nan
        y = rng.normal(size=n) * 10
        lr = float(rng.uniform(0.05, 1.0))
        m = fit_gbm(X, y, GbmParams(n_stages=30, learning_rate=lr, min_samples_leaf=2), seed=seed)
        mse = [np.mean((y - m.staged_predict(X, s)) ** 2) for s in range(31)]
        assert all(b <= a + 1e-12 * max(a, 1.0) for a, b in zip(mse, mse[1:]))

    def test_stage_target_is_negative_gradient(self, noisy):
        X, y = noisy
        m = fit_gbm(X, y, GbmParams(n_stages=8, min_samples_leaf=3), seed=4)
        h = 1e-5
        for stage, tree in enumerate(m.trees):
            F = m.staged_predict(X, stage)
            loss = lambda f: 0.5 * (y - f) ** 2
            fd = (loss(F + h) - loss(F - h)) / (2 * h)
            analytic = squared_loss_gradient(y, F)
            rel = np.abs(fd - analytic) / np.maximum(np.abs(analytic), 1e-3)
            assert rel.max() < 1e-6
            # each leaf holds the mean negative gradient of its members
            for leaf in tree.leaves:
                rows = tree.leaf_members(leaf)
                assert tree.value[leaf] == pytest.approx(-analytic[rows].mean(), abs=1e-10)

    def test_round_trip(self, noisy):
        X, y = noisy
        m = fit_gbm(X, y, GbmParams(n_stages=10), seed=0)
        np.testing.assert_array_equal(GbmModel.from_dict(m.to_dict()).predict(X), m.predict(X))


class TestImportance:
    def test_stump(self):
        t = fit_tree([[0.0], [1.0]], [0.0, 1.0], TreeParams(max_depth=1, min_samples_leaf=1))
        f = ForestModel([t], np.array([0.0, 1.0]), 0, ForestParams(n_trees=1), 1)
        assert feature_importance(f) == {0: 1}

    def test_additive(self):
        X = np.zeros((4, 3))
        X[:, 2] = [0, 1, 2, 3]
        t = fit_tree(X, [0.0, 1, 5, 9], TreeParams(max_depth=2, min_samples_leaf=1))
        assert feature_importance(ForestModel([t, t], np.zeros(4), 0, ForestParams(), 3)) == {
            2: 2 * len(t.internal_nodes)}

    def test_sum_is_internal_nodes(self, forest):
        total = sum(len(t.internal_nodes) for t in forest.trees)
        assert sum(feature_importance(forest).values()) == total

"""Boosted quantile trees: fitting, tuning, rearrangement, serialization.

The simulated law y | x ~ Uniform(0, x) has conditional quantile tau*x in
closed form, which anchors the accuracy checks without reference to any
particular fitted model.
"""

import numpy as np
import pytest

from windcast.core import ConfigError, ParameterError, SchemaError
from windcast.qgbt import (
    SEARCH_ENSEMBLE,
    SEARCH_HRES,
    BoostedEnsemble,
    GbtHyperparams,
    QGbtModel,
    SearchSpace,
    fit_quantile_gbt,
    fit_quantile_model,
    load_model,
    model_from_json,
    model_to_json,
    predict_quantiles,
    save_model,
    tune_hyperparams,
)


def uniform_law(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.0, size=n)
    y = rng.uniform(0.0, x)
    return x[:, None], y


def pinball(y, q, tau):
    d = y - q
    return float(np.mean(np.maximum(tau * d, (tau - 1.0) * d)))


def constant_model(taus, values):
    """Model whose per-quantile ensembles output fixed values (no trees)."""
    return QGbtModel(
        tau_grid=tuple(taus),
        feature_names=("x0",),
        hyperparams=GbtHyperparams(),
        seed=0,
        ensembles=tuple(
            BoostedEnsemble(tau=t, f0=v, learning_rate=0.1, trees=())
            for t, v in zip(taus, values)
        ),
    )


class TestFit:
    def test_constant_target_returns_constant(self):
        X = np.linspace(0, 1, 40)[:, None]
        y = np.full(40, 0.4)
        for tau in (0.1, 0.5, 0.9):
            ens = fit_quantile_gbt(X, y, tau, GbtHyperparams(min_samples_leaf=2), seed=3)
            np.testing.assert_allclose(ens.predict(X), 0.4, rtol=0, atol=1e-12)

    def test_uniform_law_median_within_band(self):
        X, y = uniform_law(20_000, seed=11)
        ens = fit_quantile_gbt(X, y, 0.5, GbtHyperparams(), seed=7)
        grid = np.linspace(0.55, 0.95, 9)[:, None]
        pred = ens.predict(grid)
        np.testing.assert_allclose(pred, 0.5 * grid[:, 0], rtol=0, atol=0.05)

    def test_upper_quantile_dominates_lower(self):
        X, y = uniform_law(20_000, seed=23)
        lo = fit_quantile_gbt(X, y, 0.1, GbtHyperparams(), seed=5)
        hi = fit_quantile_gbt(X, y, 0.9, GbtHyperparams(), seed=6)
        Xh, _ = uniform_law(4_000, seed=99)
        frac = np.mean(hi.predict(Xh) >= lo.predict(Xh))
        assert frac >= 0.98

    def test_single_greedy_tree_improves_on_constant(self):
        hp = GbtHyperparams(
            n_estimators=1,
            learning_rate=1.0,
            subsample_fraction=1.0,
            min_samples_leaf=2,
            min_samples_split=4,
        )
        for seed in range(5):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(300, 3))
            y = np.clip(0.5 + 0.3 * np.tanh(X[:, 0]) + 0.1 * rng.normal(size=300), 0, 1)
            for tau in (0.1, 0.5, 0.9):
                ens = fit_quantile_gbt(X, y, tau, hp, seed=seed)
                base = np.quantile(y, tau, method="inverted_cdf")
                assert pinball(y, ens.predict(X), tau) <= pinball(y, np.full(300, base), tau) + 1e-12

    def test_single_tree_improvement_with_outliers(self):
        # Heavy-tailed leaves are the case where interpolated leaf values
        # could lose to the constant model; the lower quantile cannot.
        hp = GbtHyperparams(
            n_estimators=1, learning_rate=1.0, subsample_fraction=1.0,
            min_samples_leaf=2, min_samples_split=4,
        )
        X = np.arange(20, dtype=float)[:, None]
        y = np.array([0.01, 1.0] * 10)
        ens = fit_quantile_gbt(X, y, 0.1, hp, seed=0)
        base = np.quantile(y, 0.1, method="inverted_cdf")
        assert pinball(y, ens.predict(X), 0.1) <= pinball(y, np.full(20, base), 0.1) + 1e-12

    def test_permutation_invariance_full_subsample(self):
        X, y = uniform_law(600, seed=2)
        hp = GbtHyperparams(n_estimators=20, subsample_fraction=1.0, min_samples_leaf=5)
        ens_a = fit_quantile_gbt(X, y, 0.5, hp, seed=42)
        perm = np.random.default_rng(0).permutation(len(y))
        ens_b = fit_quantile_gbt(X[perm], y[perm], 0.5, hp, seed=42)
        grid = np.linspace(0.5, 1.0, 31)[:, None]
        np.testing.assert_array_equal(ens_a.predict(grid), ens_b.predict(grid))

    def test_determinism(self):
        X, y = uniform_law(800, seed=4)
        a = fit_quantile_gbt(X, y, 0.3, GbtHyperparams(n_estimators=30), seed=9)
        b = fit_quantile_gbt(X, y, 0.3, GbtHyperparams(n_estimators=30), seed=9)
        grid = np.linspace(0.5, 1.0, 50)[:, None]
        np.testing.assert_allclose(a.predict(grid), b.predict(grid), rtol=0, atol=1e-15)

    def test_too_few_rows_rejected(self):
        X = np.zeros((5, 2))
        y = np.zeros(5)
        with pytest.raises(ParameterError):
            fit_quantile_gbt(X, y, 0.5, GbtHyperparams(min_samples_leaf=10), seed=0)

    def test_targets_outside_unit_interval_rejected(self):
        X = np.zeros((30, 1))
        y = np.linspace(0, 1.2, 30)
        with pytest.raises(ParameterError):
            fit_quantile_gbt(X, y, 0.5, GbtHyperparams(min_samples_leaf=2), seed=0)


class TestPredictQuantiles:
    def test_rearrangement_sorts_raw_outputs(self):
        model = constant_model((0.25, 0.5, 0.75), (0.3, 0.2, 0.5))
        out = predict_quantiles(model, np.zeros((2, 1)))
        np.testing.assert_array_equal(out, [[0.2, 0.3, 0.5], [0.2, 0.3, 0.5]])

    def test_monotone_outputs_unchanged(self):
        model = constant_model((0.25, 0.5, 0.75), (0.2, 0.3, 0.5))
        out = predict_quantiles(model, np.zeros((1, 1)))
        np.testing.assert_array_equal(out[0], [0.2, 0.3, 0.5])

    def test_clipping_to_unit_interval(self):
        model = constant_model((0.25, 0.5, 0.75), (-0.2, 0.4, 1.07))
        out = predict_quantiles(model, np.zeros((1, 1)))
        np.testing.assert_array_equal(out[0], [0.0, 0.4, 1.0])

    def test_rows_always_nondecreasing(self):
        X, y = uniform_law(3_000, seed=31)
        model = fit_quantile_model(
            X, y, (0.05, 0.25, 0.5, 0.75, 0.95), GbtHyperparams(n_estimators=40), seed=1
        )
        out = predict_quantiles(model, X[:400])
        assert np.all(np.diff(out, axis=1) >= 0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_feature_schema_mismatch(self):
        X, y = uniform_law(200, seed=8)
        model = fit_quantile_model(
            X, y, (0.5,), GbtHyperparams(n_estimators=2, min_samples_leaf=5), seed=1,
            feature_names=("speed",),
        )
        with pytest.raises(SchemaError):
            predict_quantiles(model, X, feature_names=("direction",))
        with pytest.raises(SchemaError):
            predict_quantiles(model, np.zeros((4, 3)))


class TestTuning:
    def test_budget_one_returns_sampled_candidate(self):
        X, y = uniform_law(400, seed=14)
        hp1 = tune_hyperparams(X, y, 0.5, budget=1, seed=77)
        hp2 = tune_hyperparams(X, y, 0.5, budget=1, seed=77)
        assert hp1 == hp2
        assert SEARCH_ENSEMBLE.clamped(len(y) // 2).contains(hp1)

    def test_fixed_seed_reproducible(self):
        X, y = uniform_law(500, seed=15)
        hp1 = tune_hyperparams(X, y, 0.5, budget=3, seed=5)
        hp2 = tune_hyperparams(X, y, 0.5, budget=3, seed=5)
        assert hp1 == hp2

    def test_zero_budget_rejected(self):
        X, y = uniform_law(100, seed=16)
        with pytest.raises(ConfigError):
            tune_hyperparams(X, y, 0.5, budget=0, seed=1)

    def test_result_inside_clamped_space(self):
        X, y = uniform_law(120, seed=17)
        space = SEARCH_ENSEMBLE.clamped(60)
        for budget in (2, 5):
            hp = tune_hyperparams(X, y, 0.5, budget=budget, seed=budget)
            assert space.contains(hp)
            assert hp.learning_rate == 0.1
            assert hp.subsample_fraction == 0.8

    def test_surrogate_path_runs_and_is_reproducible(self):
        X, y = uniform_law(240, seed=18)
        hp1 = tune_hyperparams(X, y, 0.5, budget=13, seed=21)
        hp2 = tune_hyperparams(X, y, 0.5, budget=13, seed=21)
        assert hp1 == hp2

    def test_tuned_not_worse_than_default(self):
        diffs = []
        for seed in range(5):
            X, y = uniform_law(1_200, seed=100 + seed)
            Xh, yh = uniform_law(2_000, seed=200 + seed)
            hp = tune_hyperparams(X, y, 0.5, budget=8, seed=seed)
            tuned = fit_quantile_gbt(X, y, 0.5, hp, seed=seed)
            default = fit_quantile_gbt(X, y, 0.5, GbtHyperparams(), seed=seed)
            diffs.append(
                pinball(yh, tuned.predict(Xh), 0.5)
                - pinball(yh, default.predict(Xh), 0.5)
            )
        assert np.mean(diffs) <= 0.005


class TestSearchSpace:
    def test_hres_ranges(self):
        assert SEARCH_HRES.n_estimators == (50, 400)
        assert SEARCH_HRES.min_samples_split == (10, 160)
        assert SEARCH_HRES.min_samples_leaf == (10, 110)

    def test_clamping_small_dataset(self):
        space = SEARCH_ENSEMBLE.clamped(40)
        assert space.min_samples_leaf == (2, 20)
        assert space.min_samples_split == (2, 20)
        assert space.n_estimators == (2, 150)

    def test_empty_range_rejected(self):
        with pytest.raises(ParameterError):
            SearchSpace(max_depth=(9, 5))


class TestSerialization:
    def test_round_trip_predictions_identical(self, tmp_path):
        X, y = uniform_law(500, seed=19)
        model = fit_quantile_model(
            X, y, (0.25, 0.5, 0.75), GbtHyperparams(n_estimators=15), seed=2
        )
        path = tmp_path / "model.json"
        save_model(model, path)
        clone = load_model(path)
        grid = np.linspace(0.5, 1.0, 41)[:, None]
        np.testing.assert_array_equal(
            predict_quantiles(model, grid), predict_quantiles(clone, grid)
        )
        assert clone.tau_grid == model.tau_grid
        assert clone.feature_names == model.feature_names
        assert clone.hyperparams == model.hyperparams

    def test_version_and_format_checks(self):
        X, y = uniform_law(200, seed=20)
        model = fit_quantile_model(
            X, y, (0.5,), GbtHyperparams(n_estimators=2, min_samples_leaf=5), seed=3
        )
        payload = model_to_json(model)
        bad = dict(payload, version=99)
        with pytest.raises(Exception):
            model_from_json(bad)
        bad = dict(payload, format="something-else")
        with pytest.raises(Exception):
            model_from_json(bad)

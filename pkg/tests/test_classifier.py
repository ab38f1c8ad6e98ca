import numpy as np
import pytest

from classifier import (
    METHODS,
    LogisticModel,
    decision_function,
    estimate_log_ratio,
    fit_logistic,
)
from stats_models import ConfigError, Dataset, ProblemSpec, simulate_true


def _two_sample(rng, n, shift=0.0):
    x = np.concatenate([rng.normal(shift, 1.0, n), rng.normal(0.0, 1.0, n)])
    features = np.column_stack([np.ones(2 * n), x, np.abs(x - x.mean())])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    return features, labels


# ------------------------------------------------------------------ #
# Input checks
# ------------------------------------------------------------------ #


class TestInputs:
    def test_rejects_non_binary(self, rng):
        features, labels = _two_sample(rng, 10)
        with pytest.raises(ValueError, match="0/1"):
            fit_logistic(features, labels * 2, "eb", rng)

    def test_rejects_imbalance(self, rng):
        features, labels = _two_sample(rng, 10)
        labels[0] = 0
        with pytest.raises(ValueError, match="balanced"):
            fit_logistic(features, labels, "vb", rng)

    def test_rejects_single_row_class(self, rng):
        with pytest.raises(ValueError, match="at least 2"):
            fit_logistic(np.ones((2, 1)), [0, 1], "eb", rng)

    def test_rejects_nan(self, rng):
        features, labels = _two_sample(rng, 10)
        features[3, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            fit_logistic(features, labels, "eb", rng)

    def test_unknown_method(self, rng):
        features, labels = _two_sample(rng, 10)
        with pytest.raises(ValueError, match="unknown classifier method"):
            fit_logistic(features, labels, "svm", rng)


# ------------------------------------------------------------------ #
# Decision function
# ------------------------------------------------------------------ #


class TestDecision:
    def test_zero_weights(self):
        model = LogisticModel(weights=np.zeros(2), method="eb")
        np.testing.assert_array_equal(decision_function(model, np.ones((3, 2))), np.zeros(3))

    def test_dot_product(self):
        model = LogisticModel(weights=np.array([0.0, 1.0]), method="eb")
        np.testing.assert_array_equal(decision_function(model, [[1.0, 5.0]]), [5.0])

    def test_linear(self, rng):
        model = LogisticModel(weights=rng.normal(size=3), method="vb")
        a, b = rng.normal(size=(2, 4, 3))
        np.testing.assert_allclose(decision_function(model, 2 * a - 3 * b),
                                   2 * decision_function(model, a) - 3 * decision_function(model, b))

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="columns"):
            decision_function(LogisticModel(weights=np.zeros(2), method="eb"), np.ones((1, 3)))


# ------------------------------------------------------------------ #
# Fitting
# ------------------------------------------------------------------ #


class TestFit:
    @pytest.mark.parametrize("method", METHODS)
    def test_informative_feature_direction(self, method, rng):
        labels = np.repeat([1.0, 0.0], 40)
        features = np.column_stack([np.ones(80), labels + rng.normal(0.0, 0.7, 80)])
        model = fit_logistic(features, labels, method, rng)
        scores = decision_function(model, features)
        assert model.weights[1] > 0
        assert scores[labels == 1].mean() > 0 > scores[labels == 0].mean()

    @pytest.mark.parametrize("method", ["eb", "vb"])
    def test_label_swap_antisymmetry(self, method):
        features, labels = _two_sample(np.random.default_rng(3), 60, shift=0.8)
        fwd = fit_logistic(features, labels, method, np.random.default_rng(0))
        rev = fit_logistic(features, 1 - labels, method, np.random.default_rng(0))
        np.testing.assert_allclose(decision_function(rev, features), -decision_function(fwd, features), atol=1e-6)

    def test_lasso_label_swap_at_fixed_penalty(self):
        features, labels = _two_sample(np.random.default_rng(3), 60, shift=0.8)
        fwd = fit_logistic(features, labels, "cv", np.random.default_rng(0), penalty=0.1)
        rev = fit_logistic(features, 1 - labels, "cv", np.random.default_rng(0), penalty=0.1)
        np.testing.assert_allclose(rev.weights, -fwd.weights, atol=1e-4)

    def test_eb_map_is_stationary(self, rng):
        features, labels = _two_sample(rng, 45, shift=0.6)
        model = fit_logistic(features, labels, "eb", rng)
        s = 1.0 / (1.0 + np.exp(-features @ model.weights))
        grad = features.T @ (s - labels) + model.prior_precision * np.r_[0.0, model.weights[1:]]
        np.testing.assert_allclose(grad, 0.0, atol=1e-4)

    def test_eb_handles_separable_classes(self):
        labels = np.repeat([1.0, 0.0], 9)
        features = np.column_stack([np.ones(18), np.r_[np.linspace(1, 2, 9), np.linspace(-2, -1, 9)]])
        model = fit_logistic(features, labels, "eb", np.random.default_rng(0))
        assert np.all(np.isfinite(model.weights))
        assert model.weights[1] > 0

    @pytest.mark.parametrize("method", ["eb", "vb"])
    def test_duplicated_rows_equal_double_weight(self, method):
        features, labels = _two_sample(np.random.default_rng(5), 40, shift=0.5)
        doubled = fit_logistic(np.vstack([features, features]), np.concatenate([labels, labels]),
                               method, np.random.default_rng(0))
        weighted = fit_logistic(features, labels, method, np.random.default_rng(0),
                                sample_weight=np.full(labels.size, 2.0))
        np.testing.assert_allclose(weighted.weights, doubled.weights, rtol=1e-6, atol=1e-9)

    def test_eb_and_vb_agree(self):
        rng = np.random.default_rng(11)
        x = np.concatenate([rng.normal(1.0, 1.0, 400), rng.normal(0.0, 1.0, 400)])
        features = np.column_stack([np.ones(800), x])
        labels = np.concatenate([np.ones(400), np.zeros(400)])
        eb = fit_logistic(features, labels, "eb", rng).weights
        vb = fit_logistic(features, labels, "vb", rng).weights
        assert np.linalg.norm(eb - vb) <= 0.1 * np.linalg.norm(eb)

    def test_lasso_fixed_penalty(self, rng):
        features, labels = _two_sample(rng, 50, shift=1.0)
        model = fit_logistic(features, labels, "cv", rng, penalty=1.0)
        assert model.penalty == 1.0
        assert model.weights[1] > 0

    def test_lasso_shrinks_with_penalty(self, rng):
        features, labels = _two_sample(rng, 50, shift=0.3)
        strong = fit_logistic(features, labels, "cv", rng, penalty=1e3)
        np.testing.assert_allclose(strong.weights[1:], 0.0, atol=1e-8)

    def test_lasso_null_signal(self):
        means = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            features, labels = _two_sample(rng, 81)
            model = fit_logistic(features, labels, "cv", rng)
            means.append(np.mean(np.abs(decision_function(model, features))))
        assert np.mean(means) <= 0.25

    def test_bayesian_fits_report_precision(self, rng):
        features, labels = _two_sample(rng, 50, shift=1.0)
        for method in ("eb", "vb"):
            model = fit_logistic(features, labels, method, rng)
            assert 1e-6 <= model.prior_precision <= 1e6
            assert model.posterior_cov.shape == (3, 3)


# ------------------------------------------------------------------ #
# K-fold ratio estimate
# ------------------------------------------------------------------ #


class TestEstimateLogRatio:
    @pytest.mark.parametrize("method", ["eb", "vb"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_leave_one_out(self, method, seed):
        rng = np.random.default_rng(seed)
        spec = ProblemSpec(model_family="poisson", param_bounds=[(0.1, 10.0)], grid_resolution=5,
                           true_process={"kind": "poisson", "rate": 3.0}, n_obs=10, n_folds=10)
        x_obs = simulate_true(spec, 10, rng)
        est = estimate_log_ratio(spec, [3.0], x_obs, method, rng)
        assert est.per_point_log_ratios.shape == (10,)
        assert np.all(np.isfinite(est.per_point_log_ratios))
        assert est.mean == pytest.approx(np.mean(est.per_point_log_ratios))

    @pytest.mark.parametrize("theta", [0.5, 3.0, 9.5])
    def test_empirical_bayes_converges_on_ten_folds(self, theta, poisson_spec):
        for seed in range(5):
            x_obs = simulate_true(poisson_spec, 90, np.random.default_rng(seed))
            est = estimate_log_ratio(poisson_spec, [theta], x_obs, "eb", np.random.default_rng(50 + seed))
            assert np.all(np.isfinite(est.per_point_log_ratios))

    def test_indivisible_sample(self, poisson_spec, rng):
        with pytest.raises(ConfigError):
            estimate_log_ratio(poisson_spec, [3.0], Dataset(np.arange(91)), "eb", rng)

    @pytest.mark.parametrize("method", METHODS)
    def test_far_parameter_is_strongly_negative(self, method, poisson_spec):
        x_obs = simulate_true(poisson_spec, 90, np.random.default_rng(0))
        est = estimate_log_ratio(poisson_spec, [9.5], x_obs, method, np.random.default_rng(1))
        assert est.mean <= -1.0

    @pytest.mark.parametrize("method", ["eb", "vb", pytest.param("cv", marks=pytest.mark.slow)])
    def test_calibrated_when_well_specified(self, method, poisson_spec):
        means = []
        for seed in range(20):
            x_obs = simulate_true(poisson_spec, 90, np.random.default_rng(seed))
            est = estimate_log_ratio(poisson_spec, [3.0], x_obs, method, np.random.default_rng(100 + seed))
            means.append(abs(est.mean))
        assert np.mean(means) <= 0.2

    def test_reproducible(self, poisson_spec):
        x_obs = simulate_true(poisson_spec, 90, np.random.default_rng(0))
        a = estimate_log_ratio(poisson_spec, [2.0], x_obs, "eb", np.random.default_rng(4))
        b = estimate_log_ratio(poisson_spec, [2.0], x_obs, "eb", np.random.default_rng(4))
        np.testing.assert_array_equal(a.per_point_log_ratios, b.per_point_log_ratios)

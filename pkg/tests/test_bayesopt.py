import numpy as np
import pytest
from pydantic import ValidationError

from bayesopt import BayesOptConfig, LogRatioRecord, run_bayesopt, ucb


def _quadratic(theta, rng):
    value = -4.0 * (theta[0] - 0.3) ** 2 - (theta[1] + 0.5) ** 2 if theta.size > 1 else -4.0 * (theta[0] - 0.3) ** 2
    return LogRatioRecord.from_values(theta, value + 0.001 * rng.normal(size=5))


def _flat(theta, rng):
    return LogRatioRecord.from_values(theta, np.zeros(3))


# ------------------------------------------------------------------ #
# Acquisition function
# ------------------------------------------------------------------ #


class TestUcb:
    def test_value(self):
        assert ucb(1.0, 2.0, 5.0) == 11.0

    def test_vectorised(self):
        np.testing.assert_allclose(ucb(np.zeros(3), np.array([0.0, 1.0, 2.0]), 2.0), [0.0, 2.0, 4.0])

    def test_rejects_negative_sd(self):
        with pytest.raises(ValueError):
            ucb(0.0, -1.0, 1.0)


class TestConfig:
    def test_defaults(self):
        cfg = BayesOptConfig()
        assert (cfg.beta, cfg.n_init, cfg.n_total, cfg.n_candidates) == (5.0, 10, 100, 2048)

    def test_total_below_init(self):
        with pytest.raises(ValidationError):
            BayesOptConfig(n_init=10, n_total=5)


# ------------------------------------------------------------------ #
# Loop
# ------------------------------------------------------------------ #


class TestRunBayesOpt:
    def test_finds_maximum_of_concave_function(self):
        trace = run_bayesopt(_quadratic, [(0.0, 1.0)], n_init=5, n_total=30, beta=1.0,
                             rng=np.random.default_rng(0), n_candidates=256)
        best = trace.thetas[np.argmax(trace.means)]
        assert abs(best[0] - 0.3) <= 0.05
        assert trace.complete and trace.gp is not None

    def test_two_dimensional(self):
        trace = run_bayesopt(_quadratic, [(0.0, 1.0), (-2.0, 2.0)], n_init=8, n_total=40, beta=1.0,
                             rng=np.random.default_rng(3), n_candidates=512)
        best = trace.thetas[np.argmax(trace.means)]
        assert abs(best[0] - 0.3) <= 0.05
        assert abs(best[1] + 0.5) <= 0.2

    def test_design_only(self):
        trace = run_bayesopt(_quadratic, [(0.0, 1.0)], n_init=6, n_total=6, beta=5.0,
                             rng=np.random.default_rng(0))
        assert len(trace.records) == 6
        assert trace.gp is None
        assert np.all(np.isnan(trace.ucb_values))

    def test_flat_objective_explores(self):
        trace = run_bayesopt(_flat, [(0.0, 1.0)], n_init=4, n_total=20, beta=5.0,
                             rng=np.random.default_rng(1), n_candidates=256)
        grid = np.linspace(0, 1, 201)
        gaps = np.min(np.abs(grid[:, None] - trace.thetas[:, 0][None, :]), axis=1)
        assert gaps.max() <= 0.25

    def test_within_bounds(self):
        trace = run_bayesopt(_quadratic, [(0.0, 1.0), (-2.0, 2.0)], n_init=5, n_total=15, beta=5.0,
                             rng=np.random.default_rng(2), n_candidates=128)
        assert np.all(trace.thetas >= [0.0, -2.0]) and np.all(trace.thetas <= [1.0, 2.0])

    def test_reproducible(self):
        kwargs = dict(n_init=5, n_total=12, beta=2.0, n_candidates=128)
        a = run_bayesopt(_quadratic, [(0.0, 1.0)], rng=np.random.default_rng(9), **kwargs)
        b = run_bayesopt(_quadratic, [(0.0, 1.0)], rng=np.random.default_rng(9), **kwargs)
        np.testing.assert_array_equal(a.thetas, b.thetas)
        np.testing.assert_array_equal(a.means, b.means)

    def test_fixed_candidates(self):
        candidates = np.linspace(0, 1, 11)[:, None]
        trace = run_bayesopt(_quadratic, [(0.0, 1.0)], n_init=3, n_total=10, beta=1.0,
                             rng=np.random.default_rng(0), candidates=candidates)
        later = trace.thetas[3:, 0]
        on_grid = np.isclose(later[:, None], candidates[:, 0][None, :]).any(axis=1)
        in_design = np.isclose(later[:, None], trace.thetas[:3, 0][None, :]).any(axis=1)
        assert np.all(on_grid | in_design)

    def test_failure_returns_partial_trace(self):
        calls = []

        def flaky(theta, rng):
            calls.append(theta)
            if len(calls) == 3:
                raise RuntimeError("simulator crashed")
            return _quadratic(theta, rng)

        trace = run_bayesopt(flaky, [(0.0, 1.0)], n_init=5, n_total=10, beta=1.0,
                             rng=np.random.default_rng(0))
        assert len(trace.records) == 2
        assert not trace.complete
        assert "simulator crashed" in trace.error

    def test_non_finite_mean_stops_loop(self):
        trace = run_bayesopt(lambda th, rng: LogRatioRecord.from_values(th, [np.nan]), [(0.0, 1.0)],
                             n_init=3, n_total=5, beta=1.0, rng=np.random.default_rng(0))
        assert trace.error is not None and len(trace.records) == 0

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            run_bayesopt(_flat, [(1.0, 0.0)], n_init=2, n_total=3, beta=1.0, rng=np.random.default_rng(0))

    @pytest.mark.parametrize("bounds", [np.zeros((2, 3)), [0.0, 1.0], np.zeros((0, 2))])
    def test_rejects_other_bounds_layouts(self, bounds):
        with pytest.raises(ValueError, match="pairs"):
            run_bayesopt(_flat, bounds, n_init=2, n_total=3, beta=1.0, rng=np.random.default_rng(0))

    def test_square_bounds_are_pairs(self):
        trace = run_bayesopt(_flat, np.array([[0.0, 1.0], [5.0, 6.0]]), n_init=4, n_total=4, beta=1.0,
                             rng=np.random.default_rng(0))
        assert np.all(trace.thetas[:, 1] >= 5.0)
        np.testing.assert_array_equal(trace.lower, [0.0, 5.0])

    def test_rejects_small_design(self):
        with pytest.raises(ValueError):
            run_bayesopt(_flat, [(0.0, 1.0)], n_init=1, n_total=3, beta=1.0, rng=np.random.default_rng(0))


class TestTraceFrames:
    def test_columns(self):
        trace = run_bayesopt(_quadratic, [(0.0, 1.0)], n_init=3, n_total=5, beta=1.0,
                             rng=np.random.default_rng(0), n_candidates=64)
        frame = trace.to_frame(["lam"])
        assert list(frame.columns) == ["step", "lam", "mean_log_ratio", "ucb"]
        assert frame["ucb"].isna().sum() == 3
        assert trace.per_point.shape == (5, 5)
        assert len(trace.to_records_frame(["lam"])["per_point"][0]) == 5

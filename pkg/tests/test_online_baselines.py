"""
Тесты онлайн-базлайнов OGD и ADAGRAD.
"""

import numpy as np
import pytest

from conftest import example, random_batch
from core_model import Batch, CostConfig, batch_cost
from evaluation import average_regret, regret
from ingestion import DriftSpec, generate_drift_stream
from online_baselines import (
    AdagradState,
    OgdState,
    OnlineConfig,
    adagrad_step,
    first_pass,
    ogd_step,
    run_online,
)

SQUARED = CostConfig('squared', 'none')
LOGISTIC = CostConfig('logistic', 'none')


class TestOgdStep:
    def test_squared_loss_step(self):
        state = OgdState.initial(1, OnlineConfig(eta=0.5))
        ogd_step(state, example([(0, 1.0)], 1), SQUARED)
        assert state.theta[0] == pytest.approx(1.0)
        assert state.t == 1

    def test_zero_step_size_keeps_parameters(self):
        state = OgdState.initial(3, OnlineConfig(eta=0.0), theta0=[0.1, 0.2, 0.3])
        for _ in range(5):
            ogd_step(state, example([(0, 1.0), (2, -1.0)], 1), LOGISTIC)
        np.testing.assert_array_equal(state.theta, [0.1, 0.2, 0.3])

    def test_saturated_logistic_example(self):
        state = OgdState.initial(1, OnlineConfig(eta=1.0), theta0=[50.0])
        ogd_step(state, example([(0, 1.0)], 1), LOGISTIC)
        assert abs(state.theta[0] - 50.0) <= 1e-12

    def test_sqrt_schedule(self):
        state = OgdState.initial(1, OnlineConfig(eta=0.3))
        state.t = 8
        assert state.step_size() == pytest.approx(0.1)
        constant = OgdState.initial(1, OnlineConfig(eta=0.3, schedule='constant'))
        constant.t = 8
        assert constant.step_size() == 0.3

    def test_only_active_coordinates_move_without_regularizer(self):
        state = OgdState.initial(4, OnlineConfig(eta=0.5), theta0=[1.0, 1.0, 1.0, 1.0])
        ogd_step(state, example([(1, 2.0)], 0), LOGISTIC)
        assert state.theta[0] == state.theta[2] == state.theta[3] == 1.0
        assert state.theta[1] < 1.0


class TestAdagradStep:
    def test_first_step_is_normalized(self):
        state = AdagradState.initial(2, OnlineConfig(eta=0.1))
        # градиент квадратичной потери в θ = 0: 2·(0 − 1)·(−1.5) = 3
        adagrad_step(state, example([(0, -1.5)], 1), SQUARED)
        np.testing.assert_allclose(state.theta, [-0.1, 0.0], atol=1e-9)
        np.testing.assert_allclose(state.accum, [9.0, 0.0])

    def test_zero_gradient_changes_nothing(self):
        state = AdagradState.initial(2, OnlineConfig(eta=0.1), theta0=[1.0, 0.0])
        adagrad_step(state, example([(0, 1.0)], 1), SQUARED)
        np.testing.assert_array_equal(state.theta, [1.0, 0.0])
        np.testing.assert_array_equal(state.accum, [0.0, 0.0])

    def test_repeated_gradient_shrinks_steps(self):
        state = AdagradState.initial(1, OnlineConfig(eta=0.1))
        x = example([(0, 1.0)], 1)
        before = state.theta.copy()
        adagrad_step(state, x, LOGISTIC)
        first = abs(state.theta[0] - before[0])
        before = state.theta.copy()
        adagrad_step(state, x, LOGISTIC)
        second = abs(state.theta[0] - before[0])
        assert second < first

    def test_regularizer_updates_every_coordinate(self):
        cfg = CostConfig('logistic', 'l2', 1.0)
        state = AdagradState.initial(3, OnlineConfig(eta=0.1), theta0=[1.0, 1.0, 1.0])
        adagrad_step(state, example([(0, 1.0)], 1), cfg)
        assert np.all(state.theta < 1.0)


class TestRunOnline:
    def test_single_example(self):
        batch = Batch.from_examples(0, [example([(0, 1.0)], 1)], dim=1)
        run = run_online([batch], 'ogd', SQUARED, OnlineConfig(eta=0.5))
        assert run.losses == [1.0]
        np.testing.assert_allclose(run.theta, [1.0])

    @pytest.mark.parametrize('learner', ['ogd', 'adagrad'])
    def test_trace_has_one_loss_per_example(self, rng, learner):
        batches = [random_batch(rng, t, 7 + t, 4) for t in range(4)]
        run = run_online(batches, learner, LOGISTIC)
        assert len(run.losses) == sum(b.size for b in batches)
        assert len(run.batch_thetas) == 4
        np.testing.assert_array_equal(run.batch_thetas[-1], run.theta)

    def test_reads_stream_once(self, rng):
        batches = [random_batch(rng, t, 5, 3) for t in range(3)]
        consumed = []

        def stream():
            for batch in batches:
                consumed.append(batch.time_index)
                yield batch

        run_online(stream(), 'adagrad', LOGISTIC)
        assert consumed == [0, 1, 2]

    def test_empty_stream(self):
        with pytest.raises(ValueError):
            run_online([], 'ogd', LOGISTIC)

    def test_unknown_learner(self, rng):
        with pytest.raises(ValueError):
            run_online([random_batch(rng, 0, 3, 2)], 'sgd', LOGISTIC)

    @pytest.mark.parametrize('learner', ['ogd', 'adagrad'])
    def test_average_regret_decreases_on_stationary_stream(self, learner):
        stream = generate_drift_stream(DriftSpec(dim=10, batches=20, batch_size=200, sparsity=5, seed=3))
        cfg = CostConfig('logistic', 'l2', 1e-3)
        run = run_online(stream, learner, cfg, OnlineConfig(eta=0.5))
        predictive = [np.zeros(stream.dim)] + run.batch_thetas[:-1]
        report = regret(predictive, list(stream), cfg)
        averages = average_regret(report)
        assert averages[-1] < averages[4]
        assert report.cumulative[-1] >= -1e-9

    def test_first_pass_improves_on_zero(self, rng):
        theta_true = rng.standard_normal(6) * 2
        batches = [random_batch(rng, t, 100, 6, theta=theta_true) for t in range(3)]
        theta = first_pass(batches, 'adagrad', LOGISTIC)
        assert batch_cost(theta, batches, LOGISTIC) < batch_cost(np.zeros(6), batches, LOGISTIC)

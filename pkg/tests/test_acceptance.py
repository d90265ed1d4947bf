"""
Сквозные сценарии: обнаружение дрейфа, частота ложных срабатываний,
экономия вычислений градиента относительно полного переобучения и
сожаление на стационарном потоке.

Полномасштабные версии помечены slow (pytest -m slow), по умолчанию
выполняются уменьшенные варианты с ослабленными порогами.
"""

import numpy as np
import pytest

from core_model import CostConfig, CostFunction
from evaluation import average_regret, error_rate, oracle_theta_star, regret
from ingestion import DriftSpec, generate_drift_stream
from lbfgs_optimizer import minimize
from online_baselines import OnlineConfig, run_online
from sa_driver import DriverConfig, SamplerConfig, init_driver, process_batch, run_stream

COST = CostConfig('logistic', 'l2', 1e-3)


def driver_config(seed, batch_size):
    return DriverConfig(
        cost=COST,
        mismatch_link='logistic',
        sampler=SamplerConfig(m_max=batch_size, m_old_min=100, reservoir_capacity=None, seed=seed),
    )


def drift_stream(seed, dim, batches, batch_size, drift_at=None, fraction=0.5, extra=0):
    """Поток с дрейфом; extra последних батчей служат отложенной выборкой"""
    drifts = ((drift_at, fraction),) if drift_at is not None else ()
    spec = DriftSpec(dim=dim, batches=batches + extra, batch_size=batch_size, sparsity=5, drifts=drifts, seed=seed)
    stream = generate_drift_stream(spec)
    return stream.batches[:batches], stream.batches[batches:]


def retrained_at(seed, dim, batches, batch_size, drift_at):
    training, _ = drift_stream(seed, dim, batches, batch_size, drift_at)
    state, records = run_stream(training, driver_config(seed, batch_size))
    return records[drift_at].retrained


def false_trigger_rate(seed, dim, batches, batch_size):
    """Доля срабатываний после прогрева (t ≥ 2) на стационарном потоке"""
    training, _ = drift_stream(seed, dim, batches, batch_size)
    _, records = run_stream(training, driver_config(seed, batch_size))
    return float(np.mean([r.retrained for r in records[2:]]))


def efficiency(seed, dim, batches, batch_size, drift_at):
    """
    Суммарные затраты потока и полного переобучения на каждом батче: вызовы
    оракула, градиенты по отдельным примерам (вызовы × размер выборки) и
    итоговые ошибки
    """
    training, held_out = drift_stream(seed, dim, batches, batch_size, drift_at, extra=1)
    state, records = run_stream(training, driver_config(seed, batch_size))

    baseline_evals = baseline_work = 0
    baseline = None
    for t in range(len(training)):
        oracle = CostFunction(training[:t + 1], COST, shards=8)
        baseline = minimize(oracle, np.zeros(dim))
        baseline_evals += baseline.grad_evals
        baseline_work += baseline.grad_evals * oracle.size

    return {
        'stream_evals': state.grad_evals,
        'baseline_evals': baseline_evals,
        'stream_work': sum(r.grad_evals * (r.m_old + r.m_new) for r in records),
        'baseline_work': baseline_work,
        'stream_error': error_rate(state.theta, held_out, 'thresholded', 'logistic'),
        'baseline_error': error_rate(baseline.theta, held_out, 'thresholded', 'logistic'),
    }


def predictive_sequence(batches, cfg):
    """θ, которым оценивается каждый батч до его обработки"""
    state = init_driver(batches[0].dim, cfg)
    thetas = []
    for batch in batches:
        thetas.append(state.theta.copy())
        process_batch(state, batch, cfg)
    return thetas


def regret_curves(seed, dim, batches, batch_size):
    training, _ = drift_stream(seed, dim, batches, batch_size)
    theta_star = oracle_theta_star(training, COST)
    curves = {'sa-lbfgs': regret(predictive_sequence(training, driver_config(seed, batch_size)), training, COST, theta_star)}
    for learner in ('ogd', 'adagrad'):
        run = run_online(training, learner, COST, OnlineConfig(eta=0.5))
        predictive = [np.zeros(dim)] + run.batch_thetas[:-1]
        curves[learner] = regret(predictive, training, COST, theta_star)
    return curves


# ---------------------------------------------------------------------------
# Обнаружение дрейфа
# ---------------------------------------------------------------------------


class TestDriftDetection:
    def test_desk_scale_drift(self):
        hits = sum(retrained_at(seed, dim=20, batches=8, batch_size=3000, drift_at=4) for seed in range(5))
        assert hits >= 4

    def test_desk_scale_false_triggers(self):
        rates = [false_trigger_rate(seed, dim=20, batches=8, batch_size=3000) for seed in range(5)]
        assert np.mean(rates) <= 0.4

    @pytest.mark.slow
    def test_full_scale_drift(self):
        hits = sum(retrained_at(seed, dim=50, batches=10, batch_size=10_000, drift_at=5) for seed in range(20))
        assert hits >= 18

    @pytest.mark.slow
    def test_full_scale_false_triggers(self):
        rates = [false_trigger_rate(seed, dim=50, batches=10, batch_size=10_000) for seed in range(20)]
        assert np.mean(rates) <= 0.2


# ---------------------------------------------------------------------------
# Экономия вычислений
# ---------------------------------------------------------------------------


class TestEfficiency:
    def test_desk_scale(self):
        cost = efficiency(seed=11, dim=20, batches=8, batch_size=3000, drift_at=4)
        assert cost['stream_work'] <= 0.25 * cost['baseline_work']
        assert cost['stream_evals'] <= 0.5 * cost['baseline_evals']
        assert cost['stream_error'] <= 1.1 * cost['baseline_error']

    def test_retrains_are_counted_in_the_trace(self):
        training, _ = drift_stream(11, dim=20, batches=4, batch_size=1000)
        state, records = run_stream(training, driver_config(11, 1000))
        assert state.grad_evals == sum(r.grad_evals for r in records)
        assert all(r.grad_evals == 0 for r in records if not r.retrained)

    @pytest.mark.slow
    def test_full_scale(self):
        cost = efficiency(seed=11, dim=50, batches=10, batch_size=10_000, drift_at=5)
        assert cost['stream_work'] <= 0.25 * cost['baseline_work']
        assert cost['stream_evals'] <= 0.5 * cost['baseline_evals']
        assert cost['stream_error'] <= 1.05 * cost['baseline_error']


# ---------------------------------------------------------------------------
# Сожаление
# ---------------------------------------------------------------------------


class TestRegret:
    def test_stationary_stream(self):
        curves = regret_curves(seed=3, dim=10, batches=20, batch_size=200)
        for name, report in curves.items():
            averages = average_regret(report)
            assert report.cumulative[-1] >= -1e-9, name
            assert averages[-1] < averages[4], name

    @pytest.mark.slow
    def test_stationary_stream_full_scale(self):
        curves = regret_curves(seed=5, dim=50, batches=20, batch_size=2000)
        for name, report in curves.items():
            averages = average_regret(report)
            assert report.cumulative[-1] >= -1e-9, name
            assert averages[-1] < averages[4], name

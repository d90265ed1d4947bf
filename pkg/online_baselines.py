"""
Онлайн-базлайны: градиентный спуск (OGD) и диагональный ADAGRAD.

Каждый пример читается ровно один раз в порядке потока. Используются для
сравнения по сожалению (regret) и как грубый первый проход перед L-BFGS.
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from core_model import (
    Batch,
    CostConfig,
    Example,
    NumericError,
    ParameterVector,
    as_parameter_vector,
    loss_and_derivative,
    predict,
    regularizer,
)

LEARNERS = ('ogd', 'adagrad')
SCHEDULES = ('sqrt', 'constant')


@dataclass(frozen=True)
class OnlineConfig:
    """Базовый шаг η, расписание OGD и стабилизатор ADAGRAD"""

    eta: float = 0.1
    schedule: str = 'sqrt'
    epsilon: float = 1e-8

    def __post_init__(self):
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ValueError(f"Шаг обучения должен быть неотрицательным: {self.eta}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"Неизвестное расписание шага: {self.schedule}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon должен быть положительным: {self.epsilon}")


@dataclass
class OgdState:
    theta: ParameterVector
    eta: float = 0.1
    schedule: str = 'sqrt'
    t: int = 0

    @classmethod
    def initial(cls, dim: int, cfg: Optional[OnlineConfig] = None, theta0=None) -> 'OgdState':
        cfg = cfg or OnlineConfig()
        theta = np.zeros(dim) if theta0 is None else as_parameter_vector(theta0, dim)
        return cls(theta=theta, eta=cfg.eta, schedule=cfg.schedule)

    def step_size(self) -> float:
        """η_t: постоянный или η0/√(t+1)"""
        if self.schedule == 'constant':
            return self.eta
        return self.eta / math.sqrt(self.t + 1)


@dataclass
class AdagradState:
    theta: ParameterVector
    accum: NDArray[np.float64]
    eta: float = 0.1
    epsilon: float = 1e-8
    t: int = 0

    @classmethod
    def initial(cls, dim: int, cfg: Optional[OnlineConfig] = None, theta0=None) -> 'AdagradState':
        cfg = cfg or OnlineConfig()
        theta = np.zeros(dim) if theta0 is None else as_parameter_vector(theta0, dim)
        return cls(theta=theta, accum=np.zeros(dim), eta=cfg.eta, epsilon=cfg.epsilon)


def _example_gradient(
    theta: ParameterVector, example: Example, cfg: CostConfig
) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Градиент потерь одного примера (плюс λθ) в виде (индексы, значения)"""
    margin = predict(theta, example.features)
    _, derivative = loss_and_derivative(cfg.loss_kind, np.array([margin]), np.array([example.label]))
    scale = example.weight * float(derivative[0])
    feature_indices = np.asarray(example.features.indices, dtype=np.int64)
    feature_values = np.asarray(example.features.values, dtype=np.float64)

    _, reg_grad = regularizer(theta, cfg)
    if np.any(reg_grad):
        grad = reg_grad.copy()
        grad[feature_indices] += scale * feature_values
        indices, values = np.arange(theta.shape[0]), grad
    else:
        indices, values = feature_indices, scale * feature_values
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Нечисловой градиент примера (отступ {margin})")
    return indices, values


def example_objective(theta: ParameterVector, example: Example, cfg: CostConfig) -> float:
    """φ(θ) = w·l(θᵀx; y) + λ·S(θ) для одного примера"""
    values, _ = loss_and_derivative(cfg.loss_kind, np.array([predict(theta, example.features)]), np.array([example.label]))
    reg_value, _ = regularizer(theta, cfg)
    return example.weight * float(values[0]) + reg_value


def ogd_step(state: OgdState, example: Example, cfg: CostConfig) -> OgdState:
    """θ ← θ − η_t·∇l(θᵀx_t; y_t); состояние изменяется на месте"""
    indices, grad = _example_gradient(state.theta, example, cfg)
    eta = state.step_size()
    if eta:
        state.theta[indices] -= eta * grad
    state.t += 1
    return state


def adagrad_step(state: AdagradState, example: Example, cfg: CostConfig) -> AdagradState:
    """
    Диагональный шаг ADAGRAD

    Args:
        state: Состояние (изменяется на месте)
        example: Очередной пример
        cfg: Функция потерь и регуляризация

    Returns:
        То же состояние после шага; координаты с gᵢ = 0 не меняются
    """
    indices, grad = _example_gradient(state.theta, example, cfg)
    active = grad != 0
    indices, grad = indices[active], grad[active]
    state.accum[indices] += grad * grad
    state.theta[indices] -= state.eta * grad / np.sqrt(state.accum[indices] + state.epsilon)
    state.t += 1
    return state


class OnlineRun(NamedTuple):
    theta: ParameterVector
    losses: List[float]
    batch_thetas: List[ParameterVector]


def run_online(
    batches: Iterable[Batch],
    learner: str,
    cfg: CostConfig,
    online_cfg: Optional[OnlineConfig] = None,
    theta0=None,
) -> OnlineRun:
    """
    Один онлайн-проход по потоку батчей

    Args:
        batches: Батчи в порядке времени (итерируются однократно)
        learner: 'ogd' или 'adagrad'
        cfg: Функция потерь и регуляризация
        online_cfg: Шаг и расписание
        theta0: Начальное θ (по умолчанию нули)

    Returns:
        Итоговое θ, потери φ каждого примера до шага и θ в конце каждого батча
    """
    if learner not in LEARNERS:
        raise ValueError(f"Неизвестный онлайн-алгоритм: {learner}")
    online_cfg = online_cfg or OnlineConfig()
    step = ogd_step if learner == 'ogd' else adagrad_step
    state = None
    losses: List[float] = []
    batch_thetas: List[ParameterVector] = []

    for batch in batches:
        if state is None:
            factory = OgdState if learner == 'ogd' else AdagradState
            state = factory.initial(batch.dim, online_cfg, theta0)
        for row in range(batch.size):
            example = batch.example(row)
            losses.append(example_objective(state.theta, example, cfg))
            step(state, example, cfg)
        batch_thetas.append(state.theta.copy())
        logger.debug(f"{learner}: батч t={batch.time_index} обработан, шагов={state.t}")

    if state is None:
        raise ValueError("Онлайн-проход по пустому потоку")
    logger.info(f"Онлайн-проход {learner} завершён: примеров={state.t}, средняя потеря={np.mean(losses):.6g}")
    return OnlineRun(state.theta, losses, batch_thetas)


def first_pass(
    batches: Iterable[Batch],
    learner: str,
    cfg: CostConfig,
    online_cfg: Optional[OnlineConfig] = None,
) -> ParameterVector:
    """Грубое начальное θ одним онлайн-проходом (постоянный шаг по умолчанию)"""
    online_cfg = online_cfg or OnlineConfig(schedule='constant')
    return run_online(batches, learner, cfg, online_cfg).theta

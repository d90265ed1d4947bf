"""
L-BFGS с двухцикловой рекурсией и поиском шага по сильным условиям Вольфе.

Память кривизны (пары s, y) возвращается вызывающему коду и может быть
передана в следующий вызов minimize для тёплого старта.
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Iterable, Iterator, Optional, Tuple

import numpy as np
from loguru import logger

from core_model import NumericError, ParameterVector

CostOracle = Callable[[ParameterVector], Tuple[float, ParameterVector]]

# Пары с yᵀs <= CURVATURE_SKIP_TOL·‖s‖‖y‖ не сохраняются
CURVATURE_SKIP_TOL = 1e-12

# Неудача поиска шага при ожидаемом убывании меньше стольких ulp стоимости
# считается пределом точности: остановка без сброса памяти
COST_NOISE_ULPS = 1e3


class LineSearchError(RuntimeError):
    """Поиск шага не нашёл точки с достаточным убыванием"""

    def __init__(self, message: str, evaluations: int = 0):
        super().__init__(message)
        self.evaluations = evaluations


class FlatDirectionError(LineSearchError):
    """Ожидаемое убывание вдоль направления ниже разрешения стоимости"""


class OptimizationInputError(ValueError):
    """Некорректная начальная точка (нечисловая стоимость или градиент)"""


@dataclass(frozen=True)
class CurvaturePair:
    s: ParameterVector
    y: ParameterVector
    rho: float


class CurvatureMemory:
    """Кольцевой буфер пар кривизны, от старых к новым"""

    def __init__(self, capacity: int = 10, pairs: Iterable[CurvaturePair] = ()):
        if capacity < 1:
            raise ValueError(f"Ёмкость памяти L-BFGS должна быть положительной: {capacity}")
        self.capacity = capacity
        self._pairs: Deque[CurvaturePair] = deque(pairs, maxlen=capacity)

    def __len__(self) -> int:
        return len(self._pairs)

    def __iter__(self) -> Iterator[CurvaturePair]:
        return iter(self._pairs)

    @property
    def pairs(self) -> Tuple[CurvaturePair, ...]:
        return tuple(self._pairs)

    @property
    def gamma(self) -> float:
        """Начальный масштаб обратного гессиана sᵀy/yᵀy по самой новой паре"""
        if not self._pairs:
            return 1.0
        newest = self._pairs[-1]
        return float(np.dot(newest.s, newest.y) / np.dot(newest.y, newest.y))

    def push(self, s: ParameterVector, y: ParameterVector) -> bool:
        """
        Добавить пару (s, y), если кривизна положительна

        Returns:
            True если пара сохранена
        """
        sy = float(np.dot(s, y))
        threshold = CURVATURE_SKIP_TOL * float(np.linalg.norm(s)) * float(np.linalg.norm(y))
        if not math.isfinite(sy) or sy <= threshold:
            logger.debug(f"Пара кривизны пропущена: yᵀs={sy:.3e}")
            return False
        s = np.array(s, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        s.setflags(write=False)
        y.setflags(write=False)
        self._pairs.append(CurvaturePair(s, y, 1.0 / sy))
        return True

    def clear(self):
        self._pairs.clear()

    def copy(self) -> 'CurvatureMemory':
        return CurvatureMemory(self.capacity, self._pairs)


@dataclass(frozen=True)
class LbfgsConfig:
    max_iterations: int = 100
    grad_tolerance: float = 1e-6
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search_steps: int = 25
    memory_size: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations должно быть положительным: {self.max_iterations}")
        if not self.grad_tolerance > 0:
            raise ValueError(f"grad_tolerance должно быть положительным: {self.grad_tolerance}")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError(f"Нужно 0 < c1 < c2 < 1, получено c1={self.wolfe_c1}, c2={self.wolfe_c2}")
        if self.wolfe_c1 >= 0.5:
            raise ValueError(f"c1 должно быть меньше 1/2: {self.wolfe_c1}")
        if self.max_line_search_steps < 1:
            raise ValueError(f"max_line_search_steps должно быть положительным: {self.max_line_search_steps}")
        if self.memory_size < 1:
            raise ValueError(f"Размер памяти должен быть положительным: {self.memory_size}")


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    cost: float
    grad: ParameterVector
    evaluations: int
    wolfe_satisfied: bool


@dataclass(frozen=True)
class OptimizeResult:
    theta: ParameterVector
    memory: CurvatureMemory
    iterations: int
    final_cost: float
    final_grad_norm: float
    converged: bool
    cost_evals: int
    grad_evals: int


def two_loop_direction(grad: ParameterVector, memory: CurvatureMemory) -> ParameterVector:
    """
    Направление поиска d = -H·g через двухцикловую рекурсию

    Args:
        grad: Текущий градиент
        memory: Пары кривизны

    Returns:
        Направление спуска; -γg при пустой памяти, 0 при g = 0
    """
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("Градиент содержит нечисловые значения")
    if not np.any(g):
        return np.zeros_like(g)

    q = g.copy()
    alphas = []
    for pair in reversed(memory.pairs):
        a = pair.rho * float(np.dot(pair.s, q))
        q -= a * pair.y
        alphas.append(a)

    r = memory.gamma * q
    for pair, a in zip(memory.pairs, reversed(alphas)):
        b = pair.rho * float(np.dot(pair.y, r))
        r += (a - b) * pair.s
    return -r


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None) -> float:
    """Минимум кубики через две точки с производными, зажатый в границы"""
    if bounds is not None:
        lo, hi = bounds
    else:
        lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
    if x1 == x2 or not all(math.isfinite(v) for v in (f1, g1, f2, g2)):
        return (lo + hi) / 2.0
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    d2_square = d1 * d1 - g1 * g2
    if d2_square < 0:
        return (lo + hi) / 2.0
    d2 = math.sqrt(d2_square)
    if x1 <= x2:
        denominator = g2 - g1 + 2.0 * d2
        min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / denominator) if denominator else (lo + hi) / 2.0
    else:
        denominator = g1 - g2 + 2.0 * d2
        min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / denominator) if denominator else (lo + hi) / 2.0
    if not math.isfinite(min_pos):
        return (lo + hi) / 2.0
    return min(max(min_pos, lo), hi)


def _cost_resolution(cost: float) -> float:
    return float(np.finfo(np.float64).eps) * max(abs(cost), 1.0)


def _within_cost_noise(gtd: float, cost: float) -> bool:
    return gtd < 0 and -gtd <= COST_NOISE_ULPS * _cost_resolution(cost)


def _check_descent(gtd: float, cost: float):
    if not gtd < 0:
        raise LineSearchError(f"Направление не является направлением спуска: gᵀd={gtd:.3e}")
    # убывание меньше машинной точности стоимости не наблюдаемо
    if -gtd <= _cost_resolution(cost):
        raise FlatDirectionError(f"Направление почти горизонтально: gᵀd={gtd:.3e}")


def wolfe_line_search(
    oracle: CostOracle,
    theta: ParameterVector,
    direction: ParameterVector,
    grad: ParameterVector,
    cost: Optional[float] = None,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_steps: int = 25,
    initial_step: float = 1.0,
) -> LineSearchResult:
    """
    Поиск шага α, удовлетворяющего сильным условиям Вольфе

    Фаза расширения интервала и фаза сужения (zoom) с кубической
    интерполяцией. Если лимит шагов исчерпан, возвращается лучший шаг с
    достаточным убыванием.

    Args:
        oracle: θ -> (стоимость, градиент)
        theta: Текущая точка
        direction: Направление спуска d
        grad: Градиент в текущей точке
        cost: Стоимость в текущей точке (будет вычислена, если не передана)
        c1: Параметр достаточного убывания
        c2: Параметр условия кривизны
        max_steps: Максимум вычислений оракула
        initial_step: Первый пробный шаг

    Returns:
        Результат с шагом, новой стоимостью и градиентом
    """
    evaluations = 0
    if cost is None:
        cost, _ = oracle(theta)
        evaluations += 1
    f0 = float(cost)
    gtd0 = float(np.dot(grad, direction))
    _check_descent(gtd0, f0)

    def evaluate(alpha):
        nonlocal evaluations
        f, g = oracle(theta + alpha * direction)
        evaluations += 1
        return float(f), g, float(np.dot(g, direction))

    best = None

    def remember(alpha, f, g):
        nonlocal best
        if math.isfinite(f) and f <= f0 + c1 * alpha * gtd0 and (best is None or f < best[1]):
            best = (alpha, f, g)

    prev = (0.0, f0, grad, gtd0)
    alpha = initial_step
    bracket = None
    steps = 0
    while steps < max_steps:
        f_new, g_new, gtd_new = evaluate(alpha)
        steps += 1
        remember(alpha, f_new, g_new)
        current = (alpha, f_new, g_new, gtd_new)

        if not math.isfinite(f_new) or f_new > f0 + c1 * alpha * gtd0 or (steps > 1 and f_new >= prev[1]):
            bracket = [prev, current]
            break
        if abs(gtd_new) <= -c2 * gtd0:
            return LineSearchResult(alpha, f_new, g_new, evaluations, True)
        if gtd_new >= 0:
            bracket = [current, prev]
            break

        next_alpha = _cubic_interpolate(
            prev[0], prev[1], prev[3], alpha, f_new, gtd_new,
            bounds=(alpha + 0.01 * (alpha - prev[0]), 10.0 * alpha),
        )
        prev = current
        alpha = next_alpha

    # bracket = [lo, hi], lo имеет наименьшую стоимость
    if bracket is not None:
        lo, hi = bracket
        while steps < max_steps:
            width = abs(hi[0] - lo[0])
            if width * float(np.max(np.abs(direction))) < 1e-12:
                break
            alpha = _cubic_interpolate(lo[0], lo[1], lo[3], hi[0], hi[1], hi[3])
            left, right = min(lo[0], hi[0]), max(lo[0], hi[0])
            if min(alpha - left, right - alpha) < 0.1 * width:
                alpha = (left + right) / 2.0
            f_new, g_new, gtd_new = evaluate(alpha)
            steps += 1
            remember(alpha, f_new, g_new)
            current = (alpha, f_new, g_new, gtd_new)

            if not math.isfinite(f_new) or f_new > f0 + c1 * alpha * gtd0 or f_new >= lo[1]:
                hi = current
            else:
                if abs(gtd_new) <= -c2 * gtd0:
                    return LineSearchResult(alpha, f_new, g_new, evaluations, True)
                if gtd_new * (hi[0] - lo[0]) >= 0:
                    hi = lo
                lo = current

    if best is None:
        raise LineSearchError(f"Нет достаточного убывания за {steps} шагов", evaluations)
    alpha, f_best, g_best = best
    logger.debug(f"Условия Вольфе не выполнены за {steps} шагов, берём лучший шаг α={alpha:.3e}")
    return LineSearchResult(alpha, f_best, g_best, evaluations, False)


def backtracking_line_search(
    oracle: CostOracle,
    theta: ParameterVector,
    direction: ParameterVector,
    grad: ParameterVector,
    cost: float,
    c1: float = 1e-4,
    shrink: float = 0.5,
    initial_step: float = 1.0,
    max_steps: int = 50,
) -> LineSearchResult:
    """Дробление шага до выполнения условия Армихо"""
    f0 = float(cost)
    gtd0 = float(np.dot(grad, direction))
    _check_descent(gtd0, f0)
    alpha = initial_step
    for evaluations in range(1, max_steps + 1):
        f, g = oracle(theta + alpha * direction)
        if math.isfinite(f) and f <= f0 + c1 * alpha * gtd0:
            return LineSearchResult(alpha, float(f), g, evaluations, False)
        alpha *= shrink
    raise LineSearchError(f"Дробление шага не дало убывания за {max_steps} шагов", max_steps)


def minimize(
    oracle: CostOracle,
    theta0: ParameterVector,
    memory0: Optional[CurvatureMemory] = None,
    cfg: Optional[LbfgsConfig] = None,
) -> OptimizeResult:
    """
    Минимизация L-BFGS с тёплым стартом

    Args:
        oracle: θ -> (стоимость, градиент)
        theta0: Начальная точка
        memory0: Память кривизны предыдущего вызова (не изменяется)
        cfg: Настройки оптимизатора

    Returns:
        Итоговые θ, обновлённая память и счётчики
    """
    cfg = cfg or LbfgsConfig()
    theta = np.array(theta0, dtype=np.float64).reshape(-1)
    memory = memory0.copy() if memory0 is not None else CurvatureMemory(cfg.memory_size)

    cost, grad = oracle(theta)
    grad = np.asarray(grad, dtype=np.float64)
    evaluations = 1
    if not math.isfinite(cost) or not np.all(np.isfinite(grad)) or not np.all(np.isfinite(theta)):
        raise OptimizationInputError(f"Нечисловая стоимость или градиент в начальной точке: {cost}")

    iterations = 0
    while True:
        grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if grad_norm <= cfg.grad_tolerance or iterations >= cfg.max_iterations:
            break

        direction = two_loop_direction(grad, memory)
        first_step = 1.0 if len(memory) else min(1.0, 1.0 / float(np.sum(np.abs(grad))))
        try:
            step = wolfe_line_search(
                oracle, theta, direction, grad, cost,
                c1=cfg.wolfe_c1, c2=cfg.wolfe_c2,
                max_steps=cfg.max_line_search_steps, initial_step=first_step,
            )
        except LineSearchError as error:
            evaluations += error.evaluations
            if isinstance(error, FlatDirectionError) or _within_cost_noise(float(np.dot(grad, direction)), cost):
                # убывание неотличимо от округления стоимости; память сохраняется для тёплого старта
                logger.debug(f"Итерация {iterations}: {error}; остановка на пределе точности стоимости")
                break
            logger.warning(f"Итерация {iterations}: {error}; сброс памяти и шаг наискорейшего спуска")
            memory.clear()
            direction = -grad
            try:
                step = backtracking_line_search(
                    oracle, theta, direction, grad, cost, c1=cfg.wolfe_c1,
                    initial_step=min(1.0, 1.0 / float(np.sum(np.abs(grad)))),
                    max_steps=cfg.max_line_search_steps,
                )
            except LineSearchError as fallback_error:
                evaluations += fallback_error.evaluations
                logger.warning(f"Наискорейший спуск тоже не удался: {fallback_error}; остановка")
                break

        evaluations += step.evaluations
        s = step.alpha * direction
        y = np.asarray(step.grad, dtype=np.float64) - grad
        memory.push(s, y)
        theta = theta + s
        cost, grad = step.cost, np.asarray(step.grad, dtype=np.float64)
        iterations += 1
        logger.debug(f"L-BFGS итерация {iterations}: f={cost:.10g}, α={step.alpha:.3e}, пар={len(memory)}")

    grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    converged = grad_norm <= cfg.grad_tolerance
    log = logger.info if converged else logger.warning
    log(
        f"L-BFGS завершён: итераций={iterations}, f={cost:.10g}, ‖g‖∞={grad_norm:.3e}, "
        f"вычислений={evaluations}, сходимость={'да' if converged else 'нет'}"
    )
    return OptimizeResult(
        theta=theta,
        memory=memory,
        iterations=iterations,
        final_cost=float(cost),
        final_grad_norm=grad_norm,
        converged=converged,
        cost_evals=evaluations,
        grad_evals=evaluations,
    )

"""
Рекурсивные наименьшие квадраты с коэффициентом забывания.

Нормальные уравнения накапливаются в (A, B) без хранения всей истории;
вес μ задаёт соотношение старых и новых данных (μ = 1 даёт точное
накопление, μ = 0 оставляет только последний батч).
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from core_model import Batch, DimensionMismatchError, ParameterVector

# Порог числа обусловленности A
MAX_CONDITION = 1e12
RIDGE_SCALE = 1e-8

Design = Tuple[NDArray[np.float64], NDArray[np.float64]]


class SingularMatrixError(np.linalg.LinAlgError):
    """Матрица A вырождена или плохо обусловлена"""


@dataclass(frozen=True)
class ForgetWeight:
    """Вес μ и производный коэффициент λ = μ²/(1+μ²)"""

    mu: float = 1.0
    lambda_forget: float = field(init=False)

    def __post_init__(self):
        if not math.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"μ должен быть конечным и неотрицательным: {self.mu}")
        object.__setattr__(self, 'lambda_forget', self.mu * self.mu / (1.0 + self.mu * self.mu))

    @property
    def prefactor(self) -> float:
        return 2.0 / (1.0 + self.mu * self.mu)


@dataclass(frozen=True, eq=False)
class ForgettingState:
    A: NDArray[np.float64]
    B: NDArray[np.float64]
    t: int = 0

    @property
    def dim(self) -> int:
        return self.B.shape[0]


def _check_design(X, Y, dim=None) -> Design:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(f"Число строк X ({X.shape[0]}) не совпадает с длиной Y ({Y.shape[0]})")
    if dim is not None and X.shape[1] != dim:
        raise DimensionMismatchError(f"Число столбцов X ({X.shape[1]}) не совпадает с размерностью {dim}")
    return X, Y


def _gram(X: NDArray) -> NDArray:
    gram = X.T @ X
    return 0.5 * (gram + gram.T)


def dense_design(batch: Batch) -> Design:
    """Плотные (X, Y) из разреженного батча"""
    return batch.matrix.toarray(), batch.labels.astype(np.float64)


def init_state(X0, Y0) -> ForgettingState:
    """A = X₀ᵀX₀, B = X₀ᵀY₀"""
    X, Y = _check_design(X0, Y0)
    if X.shape[0] < 1:
        raise ValueError("Начальный батч должен содержать хотя бы одну строку")
    return ForgettingState(_gram(X), X.T @ Y, 0)


def update_state(state: ForgettingState, X_new, Y_new, weight: ForgetWeight) -> ForgettingState:
    """
    Обновление с забыванием

    Args:
        state: Текущее (A, B)
        X_new: Матрица нового батча
        Y_new: Отклики нового батча
        weight: Вес μ

    Returns:
        A ← 2/(1+μ²)·(μ²A + XᵀX), B ← 2/(1+μ²)·(μ²B + XᵀY)
    """
    X, Y = _check_design(X_new, Y_new, state.dim)
    mu2 = weight.mu * weight.mu
    A = weight.prefactor * (mu2 * state.A + _gram(X))
    B = weight.prefactor * (mu2 * state.B + X.T @ Y)
    return ForgettingState(A, B, state.t + 1)


def solve_theta(state: ForgettingState, ridge: bool = False) -> ParameterVector:
    """
    θ = A⁻¹B через разложение Холецкого

    Args:
        state: Накопленное (A, B)
        ridge: Добавить A + εI, ε = 1e-8·trace(A)/l

    Returns:
        Вектор параметров
    """
    A = state.A
    if ridge:
        trace = float(np.trace(A))
        epsilon = RIDGE_SCALE * trace / state.dim if trace > 0 else RIDGE_SCALE
        A = A + epsilon * np.eye(state.dim)
    eigenvalues = np.linalg.eigvalsh(A)
    smallest, largest = float(eigenvalues[0]), float(eigenvalues[-1])
    if smallest <= 0 or largest / smallest > MAX_CONDITION:
        logger.error(f"Матрица A вырождена: λmin={smallest:.3e}, λmax={largest:.3e}")
        raise SingularMatrixError(
            f"Матрица A вырождена или плохо обусловлена (λmin={smallest:.3e}, λmax={largest:.3e})"
        )
    return cho_solve(cho_factor(A), state.B)


def fit_error(theta: ParameterVector, designs: Sequence[Design]) -> float:
    """Σ_s ‖X_sθ − Y_s‖²"""
    theta = np.asarray(theta, dtype=np.float64)
    total = 0.0
    for X, Y in designs:
        X, Y = _check_design(X, Y, theta.shape[0])
        residual = X @ theta - Y
        total += float(np.dot(residual, residual))
    return total


class LsStep(NamedTuple):
    t: int
    theta: ParameterVector
    fit_error: float


def least_squares_stream(designs: Iterable[Design], weight: ForgetWeight, ridge: bool = False) -> List[LsStep]:
    """Прогон init/update/solve по последовательности батчей"""
    state = None
    seen: List[Design] = []
    steps: List[LsStep] = []
    for X, Y in designs:
        seen.append((X, Y))
        state = init_state(X, Y) if state is None else update_state(state, X, Y, weight)
        theta = solve_theta(state, ridge=ridge)
        steps.append(LsStep(state.t, theta, fit_error(theta, seen)))
        logger.debug(f"МНК t={state.t}: ошибка={steps[-1].fit_error:.6g}")
    if state is None:
        raise ValueError("Пустая последовательность батчей")
    logger.info(f"МНК с забыванием (μ={weight.mu}): обработано батчей {len(steps)}")
    return steps

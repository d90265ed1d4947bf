"""
Модель данных и функция стоимости линейного обучения.

Примеры, батчи и потоки батчей, гладкие выпуклые функции потерь
(логистическая и квадратичная), регуляризованная стоимость батчей и
параллельный оракул стоимости/градиента с детерминированной редукцией.
"""

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger
from numpy.typing import NDArray
from scipy.special import expit

ParameterVector = NDArray[np.float64]

LOSS_KINDS = ('logistic', 'squared')
REG_KINDS = ('none', 'l2')


class DimensionMismatchError(ValueError):
    """Индекс признака или длина вектора не согласованы с размерностью модели"""


class NumericError(ArithmeticError):
    """Нечисловое значение (nan/inf) там, где требуется конечное"""


class EmptyDataError(ValueError):
    """Операция над пустым набором данных"""


class SequencingError(ValueError):
    """Нарушен порядок индексов времени батчей"""


def as_parameter_vector(weights, dim: Optional[int] = None) -> ParameterVector:
    """
    Привести веса к плотному вектору параметров float64

    Args:
        weights: Любая последовательность чисел
        dim: Ожидаемая размерность (если задана)

    Returns:
        Копия весов в виде одномерного массива
    """
    theta = np.array(weights, dtype=np.float64).reshape(-1)
    if dim is not None and theta.shape[0] != dim:
        raise DimensionMismatchError(f"Длина вектора параметров {theta.shape[0]} не равна размерности {dim}")
    if not np.all(np.isfinite(theta)):
        raise NumericError("Вектор параметров содержит нечисловые значения")
    return theta


@dataclass(frozen=True)
class SparseVector:
    """Разреженный вектор признаков: строго возрастающие индексы и ненулевые значения"""

    indices: Tuple[int, ...] = ()
    values: Tuple[float, ...] = ()

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        values = tuple(float(v) for v in self.values)
        if len(indices) != len(values):
            raise ValueError("Число индексов не совпадает с числом значений")
        for position, index in enumerate(indices):
            if index < 0:
                raise ValueError(f"Отрицательный индекс признака: {index}")
            if position > 0 and index <= indices[position - 1]:
                raise ValueError(f"Индексы должны строго возрастать: {indices[position - 1]} -> {index}")
        for value in values:
            if not math.isfinite(value) or value == 0.0:
                raise ValueError(f"Значение признака должно быть конечным и ненулевым: {value}")
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, float]]) -> 'SparseVector':
        pairs = list(pairs)
        return cls(tuple(i for i, _ in pairs), tuple(v for _, v in pairs))

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return list(zip(self.indices, self.values))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def max_index(self) -> int:
        """Наибольший индекс или -1 для пустого вектора"""
        return self.indices[-1] if self.indices else -1


@dataclass(frozen=True)
class Example:
    """Обучающий пример: признаки, бинарная метка и неотрицательный вес"""

    features: SparseVector
    label: int
    weight: float = 1.0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"Метка должна быть 0 или 1, получено: {self.label}")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"Вес примера должен быть конечным и неотрицательным: {self.weight}")
        object.__setattr__(self, 'label', int(self.label))
        object.__setattr__(self, 'weight', float(self.weight))


@dataclass(frozen=True, eq=False)
class Batch:
    """
    Батч {X_t, Y_t} с индексом времени t.

    Признаки хранятся построчно в CSR-матрице размера m_t x l, метки и веса
    в отдельных массивах (только для чтения).
    """

    time_index: int
    matrix: sp.csr_matrix
    labels: NDArray[np.int8]
    weights: NDArray[np.float64]

    def __post_init__(self):
        if self.time_index < 0:
            raise ValueError(f"Индекс времени должен быть неотрицательным: {self.time_index}")
        matrix = self.matrix
        if not (sp.issparse(matrix) and matrix.format == 'csr'):
            raise TypeError("Матрица признаков батча должна быть в формате CSR")
        m = matrix.shape[0]
        if m < 1:
            raise ValueError(f"Батч t={self.time_index} пуст")
        if not matrix.has_canonical_format:
            raise ValueError(f"Батч t={self.time_index}: индексы признаков не упорядочены или повторяются")
        if not np.all(np.isfinite(matrix.data)) or np.any(matrix.data == 0):
            raise ValueError(f"Батч t={self.time_index}: значения признаков должны быть конечными и ненулевыми")
        if self.labels.shape != (m,) or self.weights.shape != (m,):
            raise ValueError(f"Батч t={self.time_index}: длины меток/весов не совпадают с числом строк {m}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError(f"Батч t={self.time_index}: метки должны быть 0 или 1")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError(f"Батч t={self.time_index}: веса должны быть конечными и неотрицательными")
        for array in (self.labels, self.weights):
            array.setflags(write=False)

    @classmethod
    def from_arrays(cls, time_index: int, matrix, labels, weights=None) -> 'Batch':
        """Собрать батч из матрицы признаков (любой формат scipy/numpy) и массивов"""
        csr = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        labels = np.array(labels, dtype=np.int8).reshape(-1)
        if weights is None:
            weights = np.ones(csr.shape[0], dtype=np.float64)
        weights = np.array(weights, dtype=np.float64).reshape(-1)
        return cls(int(time_index), csr, labels, weights)

    @classmethod
    def from_examples(cls, time_index: int, examples: Sequence[Example], dim: int) -> 'Batch':
        """
        Собрать батч из списка примеров

        Args:
            time_index: Индекс времени t
            examples: Примеры батча
            dim: Размерность модели l

        Returns:
            Батч; индексы вне [0, dim) считаются ошибкой
        """
        indptr = [0]
        indices: List[int] = []
        data: List[float] = []
        for example in examples:
            if example.features.max_index() >= dim:
                raise DimensionMismatchError(
                    f"Индекс признака {example.features.max_index()} вне размерности модели {dim}"
                )
            indices.extend(example.features.indices)
            data.extend(example.features.values)
            indptr.append(len(indices))
        matrix = sp.csr_matrix(
            (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
            shape=(len(examples), dim),
        )
        labels = np.array([e.label for e in examples], dtype=np.int8)
        weights = np.array([e.weight for e in examples], dtype=np.float64)
        return cls(int(time_index), matrix, labels, weights)

    @property
    def size(self) -> int:
        """m_t"""
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.size

    def example(self, row: int) -> Example:
        start, end = self.matrix.indptr[row], self.matrix.indptr[row + 1]
        features = SparseVector(
            tuple(self.matrix.indices[start:end].tolist()),
            tuple(self.matrix.data[start:end].tolist()),
        )
        return Example(features, int(self.labels[row]), float(self.weights[row]))

    @cached_property
    def examples(self) -> Tuple[Example, ...]:
        return tuple(self.example(row) for row in range(self.size))

    def select(self, rows: Sequence[int], weights=None) -> 'Batch':
        """Подвыборка строк в заданном порядке (опционально с новыми весами)"""
        rows = np.asarray(rows, dtype=np.int64)
        new_weights = self.weights[rows] if weights is None else weights
        return Batch.from_arrays(self.time_index, self.matrix[rows], self.labels[rows], new_weights)


@dataclass(frozen=True, eq=False)
class Stream:
    """Упорядоченная по времени последовательность батчей t = 0 … t_f"""

    batches: Tuple[Batch, ...]

    def __post_init__(self):
        batches = tuple(self.batches)
        for expected, batch in enumerate(batches):
            if batch.time_index != expected:
                raise SequencingError(f"Индексы времени должны идти подряд с 0: ожидался {expected}, получен {batch.time_index}")
        if batches and len({b.dim for b in batches}) != 1:
            raise DimensionMismatchError("Батчи потока имеют разную размерность")
        object.__setattr__(self, 'batches', batches)

    @property
    def dim(self) -> int:
        if not self.batches:
            raise ValueError("Пустой поток не имеет размерности")
        return self.batches[0].dim

    @property
    def total_examples(self) -> int:
        return sum(b.size for b in self.batches)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


@dataclass(frozen=True)
class CostConfig:
    """Функция потерь l, регуляризатор S и его вес λ из стоимости батча"""

    loss_kind: str = 'logistic'
    reg_kind: str = 'l2'
    reg_strength: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"Неизвестная функция потерь: {self.loss_kind}")
        if self.reg_kind not in REG_KINDS:
            raise ValueError(f"Неизвестный регуляризатор: {self.reg_kind}")
        if not math.isfinite(self.reg_strength) or self.reg_strength < 0:
            raise ValueError(f"Вес регуляризации должен быть неотрицательным: {self.reg_strength}")


def loss_and_derivative(kind: str, margins: NDArray, labels: NDArray) -> Tuple[NDArray, NDArray]:
    """
    Значения потерь и производные dl/dz для массивов отступов z и меток y

    Логистическая потеря считается в устойчивой форме
    ln(1 + exp(-|m|)) + max(0, -m), где m = (2y - 1)z.
    """
    z = np.asarray(margins, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if kind == 'logistic':
        m = (2.0 * y - 1.0) * z
        values = np.log1p(np.exp(-np.abs(m))) + np.maximum(0.0, -m)
        return values, expit(z) - y
    if kind == 'squared':
        residual = z - y
        return residual * residual, 2.0 * residual
    raise ValueError(f"Неизвестная функция потерь: {kind}")


def loss(kind: str, margin: float, label: int) -> float:
    if not math.isfinite(margin):
        raise NumericError(f"Отступ должен быть конечным: {margin}")
    values, _ = loss_and_derivative(kind, np.array([margin]), np.array([label]))
    return float(values[0])


def regularizer(theta: ParameterVector, cfg: CostConfig) -> Tuple[float, ParameterVector]:
    """λ·S(θ) и его градиент; S = ½‖θ‖² для l2"""
    if cfg.reg_kind == 'none' or cfg.reg_strength == 0.0:
        return 0.0, np.zeros_like(theta)
    return 0.5 * cfg.reg_strength * float(np.dot(theta, theta)), cfg.reg_strength * theta


def _check_theta(theta, dim: int) -> ParameterVector:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != dim:
        raise DimensionMismatchError(f"Размерность θ {theta.shape} не совпадает с размерностью данных {dim}")
    return theta


def predict(theta: ParameterVector, x: SparseVector) -> float:
    """Линейный предиктор θᵀx"""
    theta = np.asarray(theta, dtype=np.float64)
    if x.max_index() >= theta.shape[0]:
        raise DimensionMismatchError(f"Индекс признака {x.max_index()} вне размерности θ ({theta.shape[0]})")
    if not x.indices:
        return 0.0
    return float(np.dot(theta[list(x.indices)], np.array(x.values)))


def sigmoid(z):
    return expit(z)


def margins(theta: ParameterVector, batch: Batch) -> NDArray[np.float64]:
    """Вектор θᵀx для всех строк батча"""
    return batch.matrix @ _check_theta(theta, batch.dim)


def stack_batches(batches: Sequence[Batch], dim: int) -> Tuple[sp.csr_matrix, NDArray, NDArray]:
    """Конкатенация батчей в одну матрицу с метками и весами"""
    for batch in batches:
        if batch.dim != dim:
            raise DimensionMismatchError(f"Батч t={batch.time_index} имеет размерность {batch.dim}, ожидалась {dim}")
    if not batches:
        return (
            sp.csr_matrix((0, dim), dtype=np.float64),
            np.zeros(0, dtype=np.int8),
            np.zeros(0, dtype=np.float64),
        )
    matrix = sp.vstack([b.matrix for b in batches], format='csr')
    labels = np.concatenate([b.labels for b in batches])
    weights = np.concatenate([b.weights for b in batches])
    return matrix, labels, weights


# Глобальный пул потоков для вычисления шардов
_worker_pool: Optional[ThreadPoolExecutor] = None
_worker_pool_size = 0
_worker_pool_lock = threading.Lock()


def get_worker_pool(threads: int) -> Optional[ThreadPoolExecutor]:
    """Получить общий пул потоков (None для однопоточного режима)"""
    global _worker_pool, _worker_pool_size
    if threads <= 1:
        return None
    with _worker_pool_lock:
        if _worker_pool is None or _worker_pool_size != threads:
            if _worker_pool is not None:
                _worker_pool.shutdown(wait=True)
            _worker_pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix='salbfgs-shard')
            _worker_pool_size = threads
            logger.debug(f"Создан пул потоков на {threads} воркеров")
        return _worker_pool


def tree_reduce(parts: List):
    """Попарная редукция в фиксированном порядке шардов"""
    if not parts:
        raise ValueError("Нечего редуцировать")
    while len(parts) > 1:
        reduced = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            reduced.append(parts[-1])
        parts = reduced
    return parts[0]


class _Partial:
    """Частичный результат шарда: стоимость и градиент"""

    __slots__ = ('cost', 'grad')

    def __init__(self, cost: float, grad: NDArray):
        self.cost = cost
        self.grad = grad

    def __add__(self, other: '_Partial') -> '_Partial':
        return _Partial(self.cost + other.cost, self.grad + other.grad)


class CostFunction:
    """
    Оракул θ -> (стоимость, градиент) для набора батчей.

    Строки разбиваются на фиксированное число непрерывных шардов;
    результат не зависит от числа потоков.
    """

    def __init__(
        self,
        batches: Sequence[Batch],
        cfg: CostConfig,
        dim: Optional[int] = None,
        shards: int = 1,
        threads: int = 1,
    ):
        if dim is None:
            if not batches:
                raise ValueError("Для пустого набора батчей нужно явно указать размерность")
            dim = batches[0].dim
        if shards < 1:
            raise ValueError(f"Число шардов должно быть положительным: {shards}")
        self.cfg = cfg
        self.dim = dim
        self.threads = threads
        matrix, labels, weights = stack_batches(batches, dim)
        self.size = matrix.shape[0]
        bounds = [(k * self.size) // shards for k in range(shards + 1)]
        self._shards = [
            (matrix[lo:hi], labels[lo:hi], weights[lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]
        self.evaluations = 0

    def _evaluate_shard(self, shard, theta: ParameterVector) -> _Partial:
        matrix, labels, weights = shard
        if matrix.shape[0] == 0:
            return _Partial(0.0, np.zeros(self.dim))
        values, derivative = loss_and_derivative(self.cfg.loss_kind, matrix @ theta, labels)
        return _Partial(float(np.dot(weights, values)), matrix.T @ (weights * derivative))

    def __call__(self, theta: ParameterVector) -> Tuple[float, ParameterVector]:
        theta = _check_theta(theta, self.dim)
        pool = get_worker_pool(self.threads)
        if pool is None:
            parts = [self._evaluate_shard(shard, theta) for shard in self._shards]
        else:
            parts = list(pool.map(lambda shard: self._evaluate_shard(shard, theta), self._shards))
        total = tree_reduce(parts)
        reg_value, reg_grad = regularizer(theta, self.cfg)
        self.evaluations += 1
        return total.cost + reg_value, np.asarray(total.grad + reg_grad, dtype=np.float64)

    def cost(self, theta: ParameterVector) -> float:
        return self(theta)[0]

    def gradient(self, theta: ParameterVector) -> ParameterVector:
        return self(theta)[1]


def batch_cost(theta: ParameterVector, batches: Sequence[Batch], cfg: CostConfig, shards: int = 1, threads: int = 1) -> float:
    """Σ_batches Σ_i wᵢ·l(θᵀxᵢ; yᵢ) + λ·S(θ)"""
    theta = np.asarray(theta, dtype=np.float64)
    return CostFunction(batches, cfg, dim=theta.shape[0], shards=shards, threads=threads).cost(theta)


def batch_gradient(
    theta: ParameterVector, batches: Sequence[Batch], cfg: CostConfig, shards: int = 1, threads: int = 1
) -> ParameterVector:
    """Аналитический градиент batch_cost"""
    theta = np.asarray(theta, dtype=np.float64)
    return CostFunction(batches, cfg, dim=theta.shape[0], shards=shards, threads=threads).gradient(theta)

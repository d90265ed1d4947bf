"""
Статистически адаптивное переобучение L-BFGS на потоке батчей.

Для каждого нового батча считается статистика рассогласования I(t+1, θ_t);
если её прирост больше стандартного отклонения истории σ(t), модель
переобучается на подвыборке старых (из резервуара) и новых примеров с
тёплым стартом от (θ_t, памяти кривизны). Иначе θ не меняется.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from core_model import (
    Batch,
    CostConfig,
    CostFunction,
    DimensionMismatchError,
    EmptyDataError,
    Example,
    ParameterVector,
    SequencingError,
    Stream,
)
from evaluation import LINKS, MISMATCH_MODES, deviation_sum, error_rate
from lbfgs_optimizer import CurvatureMemory, LbfgsConfig, minimize
from online_baselines import LEARNERS, OnlineConfig, first_pass

WARM_STARTS = ('none',) + LEARNERS

# Поглощает шум округления в M_new·σ/Δ
SIZE_ROUNDING_SLACK = 1e-9

# Допустимый относительный разброс θ между независимыми подвыборками
DISPERSION_THRESHOLD = 0.1

Seed = Union[int, Sequence[int]]

__all__ = [
    'BatchRecord', 'DriverConfig', 'DriverState', 'EmptyDataError', 'MismatchHistory', 'Reservoir',
    'SampleSizeError', 'SampleSizes', 'SamplerConfig', 'SamplingReport', 'SequencingError',
    'choose_sample_sizes', 'cold_start_sizes', 'init_driver', 'mismatch', 'parallel_samplings', 'process_batch',
    'run_stream', 'should_retrain', 'sigma', 'subsample', 'trigger_decision',
]


class SampleSizeError(ValueError):
    """Запрошенный размер подвыборки больше пула"""


# === СТАТИСТИКА РАССОГЛАСОВАНИЯ ===

class MismatchHistory:
    """Ряд I(s, θ_s) с накоплением среднего и M2 (Welford)"""

    def __init__(self, values: Sequence[float] = ()):
        self.values: List[float] = []
        self._mean = 0.0
        self._m2 = 0.0
        for value in values:
            self.append(value)

    def append(self, value: float):
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"Значение рассогласования должно быть конечным и неотрицательным: {value}")
        self.values.append(value)
        delta = value - self._mean
        self._mean += delta / len(self.values)
        self._m2 += delta * (value - self._mean)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return self._mean

    @property
    def variance(self) -> float:
        return max(self._m2, 0.0) / len(self.values) if self.values else 0.0

    @property
    def last(self) -> float:
        if not self.values:
            raise EmptyDataError("История рассогласования пуста")
        return self.values[-1]


def sigma(history: MismatchHistory) -> float:
    """Стандартное отклонение (по генеральной совокупности) истории"""
    if not len(history):
        raise EmptyDataError("σ пустой истории не определено")
    return math.sqrt(history.variance)


def mismatch(
    batches: Sequence[Batch], theta: ParameterVector, mode: str = 'absolute', link: str = 'identity'
) -> float:
    """
    I(t, θ) = Σ_s Σ_i |p_θ(x_s⁽ⁱ⁾) − y_s⁽ⁱ⁾| / число примеров

    Args:
        batches: Батчи 0..t
        theta: Параметры
        mode: 'absolute' или 'thresholded' (несовпадение с p > 0.5)
        link: 'identity' (p = θᵀx) или 'logistic'

    Returns:
        Нормированное рассогласование
    """
    total = sum(b.size for b in batches)
    if total == 0:
        raise EmptyDataError("Рассогласование по пустым данным не определено")
    return sum(deviation_sum(theta, b, mode, link) for b in batches) / total


def should_retrain(i_new: float, i_old: float, sigma_t: float) -> bool:
    """Переобучение, если I_new − I_old > σ (строго)"""
    if not all(math.isfinite(v) for v in (i_new, i_old, sigma_t)):
        raise ValueError(f"Нечисловые входы триггера: {i_new}, {i_old}, {sigma_t}")
    return i_new - i_old > sigma_t


# === ПОДВЫБОРКА ===

@dataclass(frozen=True)
class SamplerConfig:
    """Ограничения M_new, M_old и резервуара (capacity=None хранит всё)"""

    m_max: int = 100_000
    m_old_min: int = 100
    reservoir_capacity: Optional[int] = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.m_max < 1:
            raise ValueError(f"m_max должно быть положительным: {self.m_max}")
        if self.m_old_min < 0:
            raise ValueError(f"m_old_min должно быть неотрицательным: {self.m_old_min}")
        if self.reservoir_capacity is not None:
            if self.reservoir_capacity < 1:
                raise ValueError(f"Ёмкость резервуара должна быть положительной: {self.reservoir_capacity}")
            if self.m_old_min > self.reservoir_capacity:
                raise ValueError(
                    f"m_old_min ({self.m_old_min}) больше ёмкости резервуара ({self.reservoir_capacity})"
                )


class SampleSizes(NamedTuple):
    m_old: int
    m_new: int


def choose_sample_sizes(
    delta: float, sigma_t: float, m_new_batch: int, cfg: SamplerConfig, occupancy: Optional[int] = None
) -> SampleSizes:
    """
    Размеры подвыборки по величине скачка Δ

    Args:
        delta: I_new − I_old (> σ)
        sigma_t: σ(t)
        m_new_batch: Размер нового батча
        cfg: Ограничения выборки
        occupancy: Заполненность резервуара (None = не ограничена)

    Returns:
        M_new = min(m, m_max), M_old = clamp(⌈M_new·σ/Δ⌉, m_old_min, occupancy)
    """
    if not delta > sigma_t >= 0:
        raise ValueError(f"Размеры выбираются только при Δ > σ ≥ 0: Δ={delta}, σ={sigma_t}")
    m_new = min(m_new_batch, cfg.m_max)
    m_old = max(math.ceil(m_new * sigma_t / delta - SIZE_ROUNDING_SLACK), cfg.m_old_min)
    if occupancy is not None:
        m_old = min(m_old, occupancy)
    return SampleSizes(int(m_old), int(m_new))


def cold_start_sizes(m_new_batch: int, cfg: SamplerConfig, occupancy: int) -> SampleSizes:
    """Равные доли старых и новых, пока σ не определено"""
    m_new = min(m_new_batch, cfg.m_max)
    return SampleSizes(min(m_new, occupancy), m_new)


class Reservoir:
    """
    Равномерная выборка без возвращения из всех прошедших примеров
    (алгоритм R)
    """

    def __init__(self, capacity: Optional[int], seed: int = 0):
        self.capacity = capacity
        self.seen = 0
        self._items: List[Example] = []
        self._rng = np.random.default_rng([seed, 2])
        self._cached_batch: Optional[Batch] = None

    def __len__(self) -> int:
        return len(self._items)

    @property
    def occupancy(self) -> int:
        return len(self._items)

    @property
    def items(self) -> Tuple[Example, ...]:
        return tuple(self._items)

    def add_batch(self, batch: Batch):
        """Поглотить все примеры батча по порядку"""
        m = batch.size
        self._cached_batch = None
        if self.capacity is None:
            self._items.extend(batch.examples)
            self.seen += m
            return
        free = max(self.capacity - len(self._items), 0)
        direct = min(free, m)
        self._items.extend(batch.example(row) for row in range(direct))
        if direct < m:
            # слот j ∈ [0, seen) для каждого следующего примера; j < capacity означает замену
            highs = self.seen + np.arange(direct, m) + 1
            slots = self._rng.integers(0, highs)
            for row, slot in zip(range(direct, m), slots.tolist()):
                if slot < self.capacity:
                    self._items[slot] = batch.example(row)
        self.seen += m

    def as_batch(self, dim: int) -> Optional[Batch]:
        """Содержимое резервуара как батч (кешируется до следующего изменения)"""
        if not self._items:
            return None
        if self._cached_batch is None or self._cached_batch.dim != dim:
            self._cached_batch = Batch.from_examples(0, self._items, dim)
        return self._cached_batch


def _draw_rows(occupancy: int, batch_size: int, sizes: SampleSizes, seed: Seed) -> Tuple[NDArray, NDArray]:
    if sizes.m_old < 0 or sizes.m_new < 0:
        raise SampleSizeError(f"Отрицательный размер подвыборки: {sizes}")
    if sizes.m_old > occupancy:
        raise SampleSizeError(f"M_old={sizes.m_old} больше заполненности резервуара {occupancy}")
    if sizes.m_new > batch_size:
        raise SampleSizeError(f"M_new={sizes.m_new} больше размера батча {batch_size}")
    rng = np.random.default_rng(seed)
    old_rows = np.sort(rng.choice(occupancy, size=sizes.m_old, replace=False))
    new_rows = np.sort(rng.choice(batch_size, size=sizes.m_new, replace=False))
    return old_rows, new_rows


def _assemble(
    reservoir: Reservoir, new_batch: Batch, old_rows: NDArray, new_rows: NDArray, reweight: bool
) -> Batch:
    old_scale = reservoir.seen / len(old_rows) if reweight and len(old_rows) else 1.0
    new_scale = new_batch.size / len(new_rows) if reweight and len(new_rows) else 1.0
    items = reservoir.items
    examples = [items[i] for i in old_rows.tolist()]
    examples.extend(new_batch.example(row) for row in new_rows.tolist())
    if reweight:
        examples = [
            Example(e.features, e.label, e.weight * (old_scale if position < len(old_rows) else new_scale))
            for position, e in enumerate(examples)
        ]
    if not examples:
        raise SampleSizeError("Пустая обучающая подвыборка")
    return Batch.from_examples(new_batch.time_index, examples, new_batch.dim)


def subsample(
    reservoir: Reservoir, new_batch: Batch, sizes: SampleSizes, seed: Seed, reweight: bool = False
) -> Batch:
    """
    Обучающая подвыборка: M_old из резервуара, затем M_new из нового батча

    Args:
        reservoir: Пул старых примеров
        new_batch: Новый батч
        sizes: (M_old, M_new)
        seed: Зерно генератора
        reweight: Масштабировать веса до размера совокупности

    Returns:
        Батч с индексом времени нового батча
    """
    old_rows, new_rows = _draw_rows(reservoir.occupancy, new_batch.size, sizes, seed)
    return _assemble(reservoir, new_batch, old_rows, new_rows, reweight)


# === ДРАЙВЕР ===

@dataclass(frozen=True)
class DriverConfig:
    cost: CostConfig = field(default_factory=CostConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mismatch_mode: str = 'absolute'
    mismatch_link: str = 'identity'
    reset_memory: bool = False
    reweight: bool = False
    warm_start: str = 'none'
    online_eta: float = 0.1
    shards: int = 8
    threads: int = 1

    def __post_init__(self):
        if self.mismatch_mode not in MISMATCH_MODES:
            raise ValueError(f"Неизвестный режим рассогласования: {self.mismatch_mode}")
        if self.mismatch_link not in LINKS:
            raise ValueError(f"Неизвестная связь рассогласования: {self.mismatch_link}")
        if self.warm_start not in WARM_STARTS:
            raise ValueError(f"Неизвестный тёплый старт: {self.warm_start}")
        if self.shards < 1 or self.threads < 1:
            raise ValueError(f"Число шардов и потоков должно быть положительным: {self.shards}, {self.threads}")


@dataclass(frozen=True)
class BatchRecord:
    t: int
    i_before: float
    i_after: float
    retrained: bool
    m_old: int
    m_new: int
    grad_evals: int
    seconds: float

    def to_line(self, with_seconds: bool = False) -> str:
        """Строка трассы `key=value` в фиксированном порядке ключей"""
        seconds = f"{self.seconds:.6f}" if with_seconds else '-'
        return (
            f"t={self.t} i_before={self.i_before!r} i_after={self.i_after!r} "
            f"retrained={'true' if self.retrained else 'false'} m_old={self.m_old} m_new={self.m_new} "
            f"grad_evals={self.grad_evals} seconds={seconds}"
        )


@dataclass
class DriverState:
    theta: ParameterVector
    memory: CurvatureMemory
    history: MismatchHistory
    reservoir: Reservoir
    t: int = -1
    retrains: int = 0
    grad_evals: int = 0
    records: List[BatchRecord] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]


def init_driver(dim: int, cfg: DriverConfig, theta0=None) -> DriverState:
    theta = np.zeros(dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    return DriverState(
        theta=theta,
        memory=CurvatureMemory(cfg.lbfgs.memory_size),
        history=MismatchHistory(),
        reservoir=Reservoir(cfg.sampler.reservoir_capacity, cfg.sampler.seed),
    )


def _estimated_mismatch(state: DriverState, theta: ParameterVector, batch: Batch, cfg: DriverConfig) -> float:
    """I по резервуару (оценка прошлых данных) плюс точный новый батч"""
    new_sum = deviation_sum(theta, batch, cfg.mismatch_mode, cfg.mismatch_link)
    past = state.reservoir.seen
    old = state.reservoir.as_batch(batch.dim)
    past_sum = 0.0
    if old is not None and past:
        past_sum = deviation_sum(theta, old, cfg.mismatch_mode, cfg.mismatch_link) / old.size * past
    return (past_sum + new_sum) / (past + batch.size)


def _retrain(state: DriverState, training: Batch, theta0: ParameterVector, cfg: DriverConfig):
    oracle = CostFunction([training], cfg.cost, dim=state.dim, shards=cfg.shards, threads=cfg.threads)
    memory0 = None if cfg.reset_memory else state.memory
    return minimize(oracle, theta0, memory0, cfg.lbfgs)


def trigger_decision(state: DriverState, batch: Batch, cfg: DriverConfig) -> Tuple[float, Optional[SampleSizes]]:
    """I(t+1, θ_t) и размеры подвыборки (None, если переобучение не нужно)"""
    i_new = _estimated_mismatch(state, state.theta, batch, cfg)
    occupancy = state.reservoir.occupancy
    if len(state.history) < 2:
        return i_new, cold_start_sizes(batch.size, cfg.sampler, occupancy)
    i_old = state.history.last
    sigma_t = sigma(state.history)
    if not should_retrain(i_new, i_old, sigma_t):
        logger.debug(f"t={batch.time_index}: ΔI={i_new - i_old:.3e} ≤ σ={sigma_t:.3e}, θ без изменений")
        return i_new, None
    sizes = choose_sample_sizes(i_new - i_old, sigma_t, batch.size, cfg.sampler, occupancy)
    logger.info(f"t={batch.time_index}: ΔI={i_new - i_old:.3e} > σ={sigma_t:.3e}, переобучение на {sizes}")
    return i_new, sizes


def process_batch(state: DriverState, batch: Batch, cfg: DriverConfig) -> DriverState:
    """
    Обработать очередной батч

    Args:
        state: Состояние драйвера (изменяется на месте)
        batch: Батч с индексом времени state.t + 1
        cfg: Настройки драйвера

    Returns:
        То же состояние с новой записью трассы в state.records
    """
    if batch.time_index != state.t + 1:
        raise SequencingError(f"Ожидался батч t={state.t + 1}, получен t={batch.time_index}")
    if batch.dim != state.dim:
        raise DimensionMismatchError(f"Размерность батча {batch.dim} не совпадает с размерностью модели {state.dim}")
    started = time.perf_counter()
    grad_evals = 0

    if state.t == -1:
        i_before = _estimated_mismatch(state, state.theta, batch, cfg)
        theta0 = state.theta
        if cfg.warm_start != 'none':
            theta0 = first_pass([batch], cfg.warm_start, cfg.cost, OnlineConfig(eta=cfg.online_eta, schedule='constant'))
        result = _retrain(state, batch, theta0, cfg)
        sizes = SampleSizes(0, batch.size)
    else:
        i_before, sizes = trigger_decision(state, batch, cfg)
        result = None
        if sizes is not None:
            training = subsample(
                state.reservoir, batch, sizes, (cfg.sampler.seed, batch.time_index), reweight=cfg.reweight
            )
            result = _retrain(state, training, state.theta, cfg)

    if result is not None:
        state.theta = result.theta
        state.memory = result.memory
        state.retrains += 1
        grad_evals = result.grad_evals
        i_after = _estimated_mismatch(state, state.theta, batch, cfg)
    else:
        sizes = SampleSizes(0, 0)
        i_after = i_before

    state.grad_evals += grad_evals
    state.history.append(i_after)
    state.reservoir.add_batch(batch)
    state.t = batch.time_index
    record = BatchRecord(
        t=batch.time_index,
        i_before=i_before,
        i_after=i_after,
        retrained=result is not None,
        m_old=sizes.m_old,
        m_new=sizes.m_new,
        grad_evals=grad_evals,
        seconds=time.perf_counter() - started,
    )
    state.records.append(record)
    return state


def run_stream(
    stream: Union[Stream, Sequence[Batch]],
    cfg: DriverConfig,
    state: Optional[DriverState] = None,
    on_record: Optional[Callable[[BatchRecord], None]] = None,
    before_batch: Optional[Callable[[DriverState, Batch], None]] = None,
) -> Tuple[DriverState, List[BatchRecord]]:
    """
    Свёртка process_batch по потоку

    Args:
        stream: Батчи с индексами 0, 1, …
        cfg: Настройки драйвера
        state: Начальное состояние (по умолчанию θ = 0)
        on_record: Вызывается после каждого батча (например, для записи трассы)
        before_batch: Вызывается с состоянием до обработки очередного батча

    Returns:
        Итоговое состояние и записи по батчам
    """
    batches = list(stream)
    if not batches:
        raise EmptyDataError("Пустой поток")
    if state is None:
        state = init_driver(batches[0].dim, cfg)
    for batch in batches:
        if before_batch is not None:
            before_batch(state, batch)
        process_batch(state, batch, cfg)
        if on_record is not None:
            on_record(state.records[-1])
    logger.info(
        f"Поток обработан: батчей={len(batches)}, переобучений={state.retrains}, вычислений градиента={state.grad_evals}"
    )
    return state, state.records


# === НЕЗАВИСИМЫЕ ПОДВЫБОРКИ ===

@dataclass(frozen=True, eq=False)
class SamplingReport:
    seeds: Tuple[int, ...]
    sizes: SampleSizes
    thetas: Tuple[ParameterVector, ...]
    held_out_errors: Tuple[float, ...]
    held_out_is_training: Tuple[bool, ...]
    dispersion: float

    @property
    def consistent(self) -> bool:
        return self.dispersion <= DISPERSION_THRESHOLD


def _dispersion(thetas: Sequence[ParameterVector]) -> float:
    """max ‖θᵢ − θⱼ‖ / ‖θ̄‖"""
    spread = max(
        (float(np.linalg.norm(a - b)) for i, a in enumerate(thetas) for b in thetas[i + 1:]),
        default=0.0,
    )
    if spread == 0.0:
        return 0.0
    center = float(np.linalg.norm(np.mean(thetas, axis=0)))
    return spread / center if center > 0 else math.inf


def parallel_samplings(
    state: DriverState,
    batch: Batch,
    seeds: Sequence[int],
    cfg: DriverConfig,
    sizes: Optional[SampleSizes] = None,
) -> SamplingReport:
    """
    k независимых подвыборок и переобучений с разными зёрнами

    Args:
        state: Состояние до обработки batch (не изменяется)
        batch: Новый батч
        seeds: Зёрна, по одному на экземпляр
        cfg: Настройки драйвера
        sizes: Размеры подвыборки (по умолчанию по правилу триггера)

    Returns:
        θ каждого экземпляра, ошибка на отложенных строках и разброс
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("Нужно хотя бы одно зерно")
    if sizes is None and state.t >= 0:
        _, sizes = trigger_decision(state, batch, cfg)
    if sizes is None:
        logger.warning(f"t={batch.time_index}: триггер не сработал, используются равные доли выборки")
        sizes = cold_start_sizes(batch.size, cfg.sampler, state.reservoir.occupancy)

    def run_one(seed: int):
        old_rows, new_rows = _draw_rows(state.reservoir.occupancy, batch.size, sizes, seed)
        training = _assemble(state.reservoir, batch, old_rows, new_rows, cfg.reweight)
        result = _retrain(state, training, state.theta, cfg)
        held_out = np.setdiff1d(np.arange(batch.size), new_rows)
        is_training = held_out.size == 0
        scored = batch if is_training else batch.select(held_out)
        return result.theta, error_rate(result.theta, [scored], 'thresholded', cfg.mismatch_link), is_training

    if cfg.threads > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.threads, len(seeds)), thread_name_prefix='salbfgs-sampling') as pool:
            outcomes = list(pool.map(run_one, seeds))
    else:
        outcomes = [run_one(seed) for seed in seeds]

    thetas = tuple(o[0] for o in outcomes)
    report = SamplingReport(
        seeds=seeds,
        sizes=sizes,
        thetas=thetas,
        held_out_errors=tuple(o[1] for o in outcomes),
        held_out_is_training=tuple(o[2] for o in outcomes),
        dispersion=_dispersion(thetas),
    )
    log = logger.info if report.consistent else logger.warning
    log(f"t={batch.time_index}: {len(seeds)} подвыборок, разброс θ={report.dispersion:.4g}")
    return report

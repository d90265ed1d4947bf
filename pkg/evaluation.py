"""
Метрики качества: AUC, доля ошибок и сожаление (regret) относительно θ*.
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from core_model import (
    Batch,
    CostConfig,
    CostFunction,
    EmptyDataError,
    ParameterVector,
    batch_cost,
    margins,
    sigmoid,
)
from lbfgs_optimizer import LbfgsConfig, minimize

MISMATCH_MODES = ('absolute', 'thresholded')
LINKS = ('identity', 'logistic')

ORACLE_GRAD_TOLERANCE = 1e-9


class UndefinedMetricError(ValueError):
    """Метрика не определена на данных (например, AUC по одному классу)"""


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Оценки и бинарные метки"""

    scores: NDArray[np.float64]
    labels: NDArray[np.int8]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1).astype(np.int8)
        if scores.shape != labels.shape:
            raise ValueError(f"Число оценок {scores.shape[0]} не совпадает с числом меток {labels.shape[0]}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("Оценки должны быть конечными")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("Метки должны быть 0 или 1")
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'labels', labels)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, int]]) -> 'ScoredSet':
        pairs = list(pairs)
        return cls(np.array([s for s, _ in pairs], dtype=np.float64), np.array([y for _, y in pairs], dtype=np.int8))

    @property
    def positives(self) -> int:
        return int(np.sum(self.labels))

    @property
    def negatives(self) -> int:
        return int(self.labels.shape[0] - np.sum(self.labels))

    def _require_both_classes(self):
        if self.positives == 0 or self.negatives == 0:
            raise UndefinedMetricError(
                f"AUC не определён: положительных {self.positives}, отрицательных {self.negatives}"
            )


def _roc_counts(scored: ScoredSet) -> Tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Накопленные (FP, TP) по группам равных оценок, от больших к меньшим"""
    n = scored.scores.shape[0]
    order = np.lexsort((np.arange(n), -scored.scores))
    scores = scored.scores[order]
    labels = scored.labels[order].astype(np.int64)
    ends = np.append(np.flatnonzero(np.diff(scores)), n - 1)
    tp = np.concatenate(([0], np.cumsum(labels)[ends]))
    fp = np.concatenate(([0], np.cumsum(1 - labels)[ends]))
    return fp, tp


def auc(scored: ScoredSet) -> float:
    """
    Площадь под ROC-кривой

    Один проход по оценкам, отсортированным по убыванию; группы равных
    оценок дают трапецию (ничья считается за ½).

    Args:
        scored: Оценки и метки, оба класса должны присутствовать

    Returns:
        AUC в [0, 1]
    """
    scored._require_both_classes()
    fp, tp = _roc_counts(scored)
    doubled_area = np.sum(np.diff(fp) * (tp[1:] + tp[:-1]))
    return float(doubled_area) / (2.0 * scored.positives * scored.negatives)


def roc_points(scored: ScoredSet) -> List[Tuple[float, float]]:
    """Точки ROC-кривой (FPR, TPR) от (0, 0) до (1, 1)"""
    scored._require_both_classes()
    fp, tp = _roc_counts(scored)
    return [(f / scored.negatives, t / scored.positives) for f, t in zip(fp.tolist(), tp.tolist())]


def brute_force_auc(scored: ScoredSet) -> float:
    """AUC прямым подсчётом пар O(P·N)"""
    scored._require_both_classes()
    positive = scored.scores[scored.labels == 1]
    negative = scored.scores[scored.labels == 0]
    greater = np.sum(positive[:, None] > negative[None, :])
    ties = np.sum(positive[:, None] == negative[None, :])
    return float(2 * greater + ties) / (2.0 * scored.positives * scored.negatives)


def predictions(theta: ParameterVector, batch: Batch, link: str = 'identity') -> NDArray[np.float64]:
    """p_θ(x) для строк батча: θᵀx или σ(θᵀx)"""
    if link not in LINKS:
        raise ValueError(f"Неизвестная связь предсказания: {link}")
    z = margins(theta, batch)
    return z if link == 'identity' else sigmoid(z)


def deviation_sum(theta: ParameterVector, batch: Batch, mode: str = 'absolute', link: str = 'identity') -> float:
    """Σ_i |p_θ(xᵢ) − yᵢ| (или число несовпадений порога 0.5) по одному батчу"""
    if mode not in MISMATCH_MODES:
        raise ValueError(f"Неизвестный режим ошибки: {mode}")
    p = predictions(theta, batch, link)
    if mode == 'thresholded':
        return float(np.sum((p > 0.5).astype(np.int8) != batch.labels))
    return float(np.sum(np.abs(p - batch.labels)))


def error_rate(
    theta: ParameterVector, batches: Sequence[Batch], mode: str = 'absolute', link: str = 'identity'
) -> float:
    """Доля ошибок по всем примерам батчей"""
    total = sum(b.size for b in batches)
    if total == 0:
        raise EmptyDataError("Доля ошибок по пустым данным не определена")
    return sum(deviation_sum(theta, b, mode, link) for b in batches) / total


def score_set(theta: ParameterVector, batches: Sequence[Batch], link: str = 'identity') -> ScoredSet:
    """Оценки модели на всех примерах для AUC"""
    if not batches:
        raise EmptyDataError("Нет данных для оценки")
    scores = np.concatenate([predictions(theta, b, link) for b in batches])
    labels = np.concatenate([b.labels for b in batches])
    return ScoredSet(scores, labels)


@dataclass(frozen=True, eq=False)
class RegretReport:
    theta_star: ParameterVector
    per_step: NDArray[np.float64]
    cumulative: NDArray[np.float64]


def oracle_theta_star(
    batches: Sequence[Batch],
    cfg: CostConfig,
    shards: int = 1,
    threads: int = 1,
    max_iterations: int = 1000,
) -> ParameterVector:
    """
    θ* = argmin Σ_s φ_s(θ) по всем батчам сразу

    Каждый φ_s содержит свой λ·S(θ), поэтому общий вес регуляризации равен
    λ·(число батчей).

    Args:
        batches: Все батчи потока
        cfg: Функция потерь и регуляризация одного батча
        shards: Число шардов оракула
        threads: Число потоков
        max_iterations: Лимит итераций L-BFGS

    Returns:
        Оптимальное θ с точностью ‖g‖∞ ≤ 1e-9
    """
    batches = list(batches)
    if not batches:
        raise EmptyDataError("Для θ* нужен хотя бы один батч")
    pooled = CostConfig(cfg.loss_kind, cfg.reg_kind, cfg.reg_strength * len(batches))
    oracle = CostFunction(batches, pooled, shards=shards, threads=threads)
    result = minimize(
        oracle,
        np.zeros(oracle.dim),
        cfg=LbfgsConfig(max_iterations=max_iterations, grad_tolerance=ORACLE_GRAD_TOLERANCE),
    )
    if not result.converged:
        logger.warning(f"θ* найден неточно: ‖g‖∞={result.final_grad_norm:.3e}")
    return result.theta


def regret(
    theta_sequence: Sequence[ParameterVector],
    batches: Sequence[Batch],
    cfg: CostConfig,
    theta_star: Optional[ParameterVector] = None,
) -> RegretReport:
    """
    Сожаление R_φ(t) = Σ_{s≤t} φ_s(θ_s) − φ_s(θ*)

    Args:
        theta_sequence: θ_s, которым оценивался батч s
        batches: Батчи потока
        cfg: Функция потерь и регуляризация
        theta_star: θ* (вычисляется oracle_theta_star, если не передан)

    Returns:
        Пошаговое и накопленное сожаление
    """
    batches = list(batches)
    if len(theta_sequence) != len(batches):
        raise ValueError(f"Длина последовательности θ ({len(theta_sequence)}) не равна числу батчей ({len(batches)})")
    if theta_star is None:
        theta_star = oracle_theta_star(batches, cfg)
    per_step = np.array([
        batch_cost(theta, [batch], cfg) - batch_cost(theta_star, [batch], cfg)
        for theta, batch in zip(theta_sequence, batches)
    ])
    return RegretReport(np.asarray(theta_star, dtype=np.float64), per_step, np.cumsum(per_step))


def average_regret(report: RegretReport) -> NDArray[np.float64]:
    """R_φ(t)/(t+1)"""
    return report.cumulative / np.arange(1, report.cumulative.shape[0] + 1)

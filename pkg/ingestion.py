"""
Форматы данных и подготовка признаков.

Текстовый индексированный формат примеров, каталог батчей, хеширование
именованных признаков (FNV-1a) с конъюнкциями, сглаженная CTR-таблица с
нормализацией по позиции/глубине и генератор синтетического потока с
дрейфом.
"""

import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger
from scipy.special import expit

from core_model import Batch, EmptyDataError, Example, ParameterVector, SequencingError, SparseVector, Stream

FNV_OFFSET_BASIS = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK_64 = (1 << 64) - 1

NAMESPACE_SEPARATOR = b'\x1f'
CONJUNCTION_SEPARATOR = b'\x1e'

BATCH_FILE_PATTERN = re.compile(r'^batch_(\d{5})\.txt$', re.ASCII)

CTR_ALPHA = 0.05
CTR_BETA = 75.0

# Разреженные строки генерируются векторно, пока матрица выбора не больше этого
_VECTORIZED_CHOICE_LIMIT = 50_000_000


class ParseError(ValueError):
    """Строка входного файла не соответствует формату"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"строка {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyTableError(ValueError):
    """Нет показов для построения CTR-таблицы"""


# === ИНДЕКСИРОВАННЫЙ ФОРМАТ ===

def parse_indexed_line(line: str, line_number: Optional[int] = None) -> Example:
    """
    Разбор строки `<label> <index>:<value> ...`

    Args:
        line: Строка (перевод строки в конце допускается)
        line_number: Номер строки для сообщений об ошибках

    Returns:
        Пример с единичным весом
    """
    tokens = line.rstrip('\n').rstrip('\r').split(' ')
    label_token = tokens[0]
    if label_token not in ('0', '1'):
        raise ParseError(f"метка должна быть 0 или 1, получено {label_token!r}", line_number)

    indices: List[int] = []
    values: List[float] = []
    for token in tokens[1:]:
        index_text, colon, value_text = token.partition(':')
        if not colon or not (index_text.isascii() and index_text.isdigit()):
            raise ParseError(f"некорректный признак {token!r}", line_number)
        try:
            value = float(value_text)
        except ValueError:
            raise ParseError(f"некорректное значение признака {token!r}", line_number)
        index = int(index_text)
        if indices and index <= indices[-1]:
            raise ParseError(f"индексы не возрастают: {indices[-1]} -> {index}", line_number)
        if not math.isfinite(value) or value == 0.0:
            raise ParseError(f"значение признака должно быть конечным и ненулевым: {token!r}", line_number)
        indices.append(index)
        values.append(value)
    return Example(SparseVector(tuple(indices), tuple(values)), int(label_token))


def serialize_example(example: Example) -> str:
    """Каноническая строка примера (значения через repr)"""
    parts = [str(example.label)]
    parts.extend(f"{index}:{value!r}" for index, value in example.features.entries)
    return ' '.join(parts)


def read_examples(path) -> List[Example]:
    """Все примеры индексированного файла"""
    path = Path(path)
    examples = []
    with path.open('r', encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            examples.append(parse_indexed_line(line, line_number))
    if not examples:
        raise EmptyDataError(f"Файл {path} не содержит примеров")
    return examples


def _write_atomic(path: Path, lines: Iterable[str]):
    tmp_path = path.with_name(path.name + '.tmp')
    with tmp_path.open('w', encoding='utf-8', newline='\n') as handle:
        for line in lines:
            handle.write(line + '\n')
    os.replace(tmp_path, path)


def write_examples(examples: Iterable[Example], path):
    _write_atomic(Path(path), (serialize_example(e) for e in examples))


# === КАТАЛОГ БАТЧЕЙ ===

def batch_file_name(time_index: int) -> str:
    return f"batch_{time_index:05d}.txt"


def read_batch_dir(path, dim: Optional[int] = None) -> Stream:
    """
    Прочитать каталог batch_00000.txt, batch_00001.txt, …

    Args:
        path: Каталог батчей
        dim: Размерность модели (по умолчанию наибольший индекс + 1)

    Returns:
        Поток батчей с индексами времени по именам файлов
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"Каталог батчей не найден: {path}")
    numbered = sorted(
        (int(match.group(1)), entry)
        for entry in path.iterdir()
        if (match := BATCH_FILE_PATTERN.match(entry.name))
    )
    if not numbered:
        raise FileNotFoundError(f"В каталоге {path} нет файлов батчей")
    for expected, (time_index, entry) in enumerate(numbered):
        if time_index != expected:
            raise SequencingError(f"Пропуск в нумерации батчей: ожидался {batch_file_name(expected)}, найден {entry.name}")

    per_batch = [read_examples(entry) for _, entry in numbered]
    if dim is None:
        dim = 1 + max((e.features.max_index() for examples in per_batch for e in examples), default=-1)
        dim = max(dim, 1)
    batches = tuple(Batch.from_examples(t, examples, dim) for t, examples in enumerate(per_batch))
    logger.info(f"Прочитано {len(batches)} батчей из {path} (l={dim}, примеров={sum(b.size for b in batches)})")
    return Stream(batches)


def write_batch_dir(stream: Stream, path):
    """Записать поток в каталог батчей (каждый файл атомарно)"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for batch in stream:
        _write_atomic(path / batch_file_name(batch.time_index), (serialize_example(e) for e in batch.examples))
    logger.info(f"Записано {len(stream)} батчей в {path}")


# === ХЕШИРОВАНИЕ ПРИЗНАКОВ ===

@dataclass(frozen=True)
class HashConfig:
    bits: int = 18
    conjunctions: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if not 8 <= self.bits <= 30:
            raise ValueError(f"Число бит хеша должно быть в [8, 30]: {self.bits}")
        pairs = tuple((str(a), str(b)) for a, b in self.conjunctions)
        for a, b in pairs:
            _check_namespace(a)
            _check_namespace(b)
        object.__setattr__(self, 'conjunctions', pairs)

    @property
    def dim(self) -> int:
        return 1 << self.bits


def _check_namespace(namespace: str):
    if not namespace or not namespace.isascii() or ':' in namespace or any(c.isspace() for c in namespace):
        raise ValueError(f"Некорректное пространство имён: {namespace!r}")


def fnv1a_64(data: bytes) -> int:
    value = FNV_OFFSET_BASIS
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME) & _MASK_64
    return value


def hash_feature(namespace: str, token: str, cfg: HashConfig) -> int:
    """Индекс признака: FNV-1a 64 от `namespace 0x1F token` по модулю 2^bits"""
    return fnv1a_64(namespace.encode('utf-8') + NAMESPACE_SEPARATOR + token.encode('utf-8')) % cfg.dim


def hash_conjunction(first: Tuple[str, str], second: Tuple[str, str], cfg: HashConfig) -> int:
    """Индекс пересечения двух признаков"""
    data = (
        first[0].encode('utf-8') + NAMESPACE_SEPARATOR + first[1].encode('utf-8')
        + CONJUNCTION_SEPARATOR
        + second[0].encode('utf-8') + NAMESPACE_SEPARATOR + second[1].encode('utf-8')
    )
    return fnv1a_64(data) % cfg.dim


@dataclass(frozen=True)
class RawRecord:
    label: int
    tokens: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"Метка должна быть 0 или 1, получено: {self.label}")
        for namespace, _ in self.tokens:
            _check_namespace(namespace)


def parse_raw_record(line: str, line_number: Optional[int] = None) -> RawRecord:
    """Разбор `<label> |<ns> <tok> <tok> |<ns2> <tok> ...`"""
    head, *sections = line.rstrip('\n').rstrip('\r').split('|')
    label_text = head.strip()
    if label_text not in ('0', '1'):
        raise ParseError(f"метка должна быть 0 или 1, получено {label_text!r}", line_number)
    tokens = []
    for section in sections:
        words = section.split()
        if not words:
            raise ParseError("пустое пространство имён", line_number)
        namespace, *values = words
        try:
            _check_namespace(namespace)
        except ValueError as error:
            raise ParseError(str(error), line_number)
        tokens.extend((namespace, value) for value in values)
    return RawRecord(int(label_text), tuple(tokens))


def hash_record(record: RawRecord, cfg: HashConfig) -> Example:
    """Хешированный пример; коллизии складываются"""
    counts: Dict[int, float] = defaultdict(float)
    for namespace, token in record.tokens:
        counts[hash_feature(namespace, token, cfg)] += 1.0
    for first_ns, second_ns in cfg.conjunctions:
        firsts = [t for t in record.tokens if t[0] == first_ns]
        seconds = [t for t in record.tokens if t[0] == second_ns]
        for first in firsts:
            for second in seconds:
                counts[hash_conjunction(first, second, cfg)] += 1.0
    return Example(SparseVector.from_pairs(sorted(counts.items())), record.label)


def parse_namespaced_line(line: str, cfg: HashConfig, line_number: Optional[int] = None) -> Example:
    return hash_record(parse_raw_record(line, line_number), cfg)


def hash_lines(lines: Iterable[str], cfg: HashConfig) -> List[Example]:
    return [parse_namespaced_line(line, cfg, n) for n, line in enumerate(lines, start=1) if line.strip()]


# === CTR ===

class ImpressionRecord(NamedTuple):
    identifier: str
    position: int
    depth: int
    clicks: int
    impressions: int


def parse_ctr_records(lines: Iterable[str]) -> List[ImpressionRecord]:
    """Строки `<ns>:<token> <position> <depth> <clicks> <impressions>`"""
    records = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5 or ':' not in fields[0]:
            raise ParseError(f"ожидалось 5 полей `<ns>:<token> position depth clicks impressions`", line_number)
        try:
            position, depth, clicks, impressions = (int(f) for f in fields[1:])
        except ValueError:
            raise ParseError(f"нечисловые поля: {line.strip()!r}", line_number)
        if not 0 <= clicks <= impressions:
            raise ParseError(f"нужно 0 ≤ клики ≤ показы, получено {clicks}/{impressions}", line_number)
        records.append(ImpressionRecord(fields[0], position, depth, clicks, impressions))
    return records


def aggregate_ctr(
    records: Sequence[ImpressionRecord], alpha: float = CTR_ALPHA, beta: float = CTR_BETA
) -> Dict[str, float]:
    """
    Сглаженный CTR идентификатора с нормализацией по позиции и глубине

    posnorm(p, d) = CTR в позиции (p, d) / общий CTR. Показы взвешиваются
    posnorm, т.е. сравниваются с ожидаемым числом кликов в своей позиции.

    Args:
        records: Клики и показы по (идентификатор, позиция, глубина)
        alpha: Сглаживание числителя
        beta: Сглаживание знаменателя

    Returns:
        Идентификатор -> (Σ клики + α) / (Σ показы·posnorm + β)
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"Сглаживание должно быть положительным: α={alpha}, β={beta}")
    total_clicks = sum(r.clicks for r in records)
    total_impressions = sum(r.impressions for r in records)
    if total_impressions == 0:
        raise EmptyTableError("Нет показов для CTR-таблицы")
    global_ctr = total_clicks / total_impressions

    slot_clicks: Dict[Tuple[int, int], int] = defaultdict(int)
    slot_impressions: Dict[Tuple[int, int], int] = defaultdict(int)
    for r in records:
        slot_clicks[(r.position, r.depth)] += r.clicks
        slot_impressions[(r.position, r.depth)] += r.impressions

    posnorm: Dict[Tuple[int, int], float] = {}
    for slot, impressions in slot_impressions.items():
        slot_ctr = slot_clicks[slot] / impressions if impressions else 0.0
        # без кликов нормировка не определена
        posnorm[slot] = slot_ctr / global_ctr if slot_ctr > 0 and global_ctr > 0 else 1.0

    clicks: Dict[str, float] = defaultdict(float)
    expected: Dict[str, float] = defaultdict(float)
    for r in records:
        clicks[r.identifier] += r.clicks
        expected[r.identifier] += r.impressions * posnorm[(r.position, r.depth)]
    table = {identifier: (clicks[identifier] + alpha) / (expected[identifier] + beta) for identifier in sorted(clicks)}
    logger.info(f"CTR-таблица: {len(table)} идентификаторов, общий CTR={global_ctr:.5f}")
    return table


def write_ctr_table(table: Dict[str, float], path):
    _write_atomic(Path(path), (f"{identifier} {value!r}" for identifier, value in sorted(table.items())))


# === СИНТЕТИЧЕСКИЙ ПОТОК ===

@dataclass(frozen=True)
class DriftSpec:
    """
    Синтетический поток: θ_true кусочно-постоянен, в моменты дрейфа у
    заданной доли координат меняется знак
    """

    dim: int = 50
    batches: int = 10
    batch_size: int = 1000
    sparsity: int = 10
    drifts: Tuple[Tuple[int, float], ...] = ()
    theta_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.batches < 1 or self.batch_size < 1:
            raise ValueError(f"Размеры потока должны быть положительными: l={self.dim}, батчей={self.batches}, m={self.batch_size}")
        if not 1 <= self.sparsity <= self.dim:
            raise ValueError(f"Число ненулевых признаков должно быть в [1, {self.dim}]: {self.sparsity}")
        if not math.isfinite(self.theta_scale) or self.theta_scale < 0:
            raise ValueError(f"Масштаб θ_true должен быть неотрицательным: {self.theta_scale}")
        drifts = tuple((int(t), float(f)) for t, f in self.drifts)
        for time_index, fraction in drifts:
            if not 0 < time_index <= self.batches - 1:
                raise ValueError(f"Момент дрейфа {time_index} вне (0, {self.batches - 1}]")
            if not 0.0 <= fraction <= 1.0:
                raise ValueError(f"Доля координат дрейфа должна быть в [0, 1]: {fraction}")
        object.__setattr__(self, 'drifts', drifts)


def true_parameters(spec: DriftSpec) -> List[ParameterVector]:
    """θ_true для каждого батча"""
    rng = np.random.default_rng([spec.seed, 0])
    theta = rng.normal(0.0, spec.theta_scale, spec.dim) if spec.theta_scale > 0 else np.zeros(spec.dim)
    flips = dict(spec.drifts)
    thetas = []
    for t in range(spec.batches):
        if flips.get(t, 0.0) > 0:
            count = int(round(flips[t] * spec.dim))
            chosen = rng.choice(spec.dim, size=count, replace=False)
            theta = theta.copy()
            theta[chosen] = -theta[chosen]
        thetas.append(theta)
    return thetas


def _sparse_rows(rng: np.random.Generator, rows: int, dim: int, k: int) -> sp.csr_matrix:
    if rows * dim <= _VECTORIZED_CHOICE_LIMIT:
        columns = np.argpartition(rng.random((rows, dim)), k - 1, axis=1)[:, :k]
    else:
        columns = np.stack([rng.choice(dim, size=k, replace=False) for _ in range(rows)])
    columns = np.sort(columns, axis=1)
    values = rng.standard_normal((rows, k))
    indptr = np.arange(0, rows * k + 1, k)
    return sp.csr_matrix((values.reshape(-1), columns.reshape(-1), indptr), shape=(rows, dim))


def generate_drift_stream(spec: DriftSpec) -> Stream:
    """
    Сгенерировать поток: k случайных координат со стандартными нормальными
    значениями, y ~ Bernoulli(σ(θ_trueᵀx))
    """
    thetas = true_parameters(spec)
    rng = np.random.default_rng([spec.seed, 1])
    batches = []
    for t, theta in enumerate(thetas):
        matrix = _sparse_rows(rng, spec.batch_size, spec.dim, spec.sparsity)
        uniforms = rng.random(spec.batch_size)
        labels = (uniforms < expit(matrix @ theta)).astype(np.int8)
        batches.append(Batch.from_arrays(t, matrix, labels))
    logger.info(
        f"Сгенерирован поток: батчей={spec.batches}, m={spec.batch_size}, l={spec.dim}, дрейф={list(spec.drifts)}"
    )
    return Stream(tuple(batches))

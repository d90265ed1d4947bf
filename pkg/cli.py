#!/usr/bin/env python3
"""
Точка входа командной строки: обучение, адаптивный поток, оценка,
синтетические данные, МНК с забыванием, онлайн-базлайны, хеширование и CTR.

Коды выхода: 0 успех, 1 некорректные флаги, 2 ошибка ввода/вывода или
формата данных, 3 сбой оптимизатора или вырожденная система,
4 нарушение порядка батчей, 5 AUC не определён.
"""

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from adaptive_least_squares import SingularMatrixError, dense_design, least_squares_stream
from config import MAX_DENSE_DIM, ConfigurationError, Config, load_config
from core_model import (
    Batch,
    CostFunction,
    DimensionMismatchError,
    EmptyDataError,
    NumericError,
    ParameterVector,
    SequencingError,
)
from evaluation import (
    UndefinedMetricError,
    auc,
    average_regret,
    brute_force_auc,
    error_rate,
    oracle_theta_star,
    regret,
    score_set,
)
from ingestion import (
    EmptyTableError,
    ParseError,
    aggregate_ctr,
    generate_drift_stream,
    hash_lines,
    parse_ctr_records,
    read_batch_dir,
    read_examples,
    write_batch_dir,
    write_ctr_table,
    write_examples,
)
from lbfgs_optimizer import LineSearchError, OptimizationInputError, minimize
from online_baselines import first_pass, run_online
from sa_driver import BatchRecord, DriverState, parallel_samplings, run_stream, trigger_decision

EXIT_OK = 0
EXIT_BAD_FLAGS = 1
EXIT_IO = 2
EXIT_OPTIMIZER = 3
EXIT_SEQUENCING = 4
EXIT_UNDEFINED_AUC = 5

MODEL_MAGIC = 'salbfgs-model'
MODEL_VERSION = 'v1'


class ArgumentParser(argparse.ArgumentParser):
    """argparse с кодом выхода 1 для некорректных флагов"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_BAD_FLAGS, f"{self.prog}: ошибка: {message}\n")


# === ФАЙЛЫ ===

@contextmanager
def atomic_writer(path):
    """Запись в `<path>.tmp` рядом с целевым файлом и переименование при успехе"""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + '.tmp')
    try:
        with tmp_path.open('w', encoding='utf-8', newline='\n') as handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise


def write_model(theta: ParameterVector, path, bits: Optional[int] = None):
    """Заголовок `salbfgs-model v1 dim=<l> bits=<b>`, затем `index value` ненулевых весов"""
    with atomic_writer(path) as handle:
        handle.write(f"{MODEL_MAGIC} {MODEL_VERSION} dim={theta.shape[0]} bits={bits or 0}\n")
        for index in np.flatnonzero(theta).tolist():
            handle.write(f"{index} {float(theta[index])!r}\n")
    logger.info(f"💾 Модель записана: {path}")


def read_model(path) -> Tuple[ParameterVector, int]:
    """
    Прочитать файл модели

    Returns:
        θ и число бит хеша (0, если признаки не хешировались)
    """
    with Path(path).open('r', encoding='utf-8') as handle:
        header = handle.readline().split()
        if len(header) != 4 or header[0] != MODEL_MAGIC or header[1] != MODEL_VERSION:
            raise ParseError(f"некорректный заголовок модели в {path}", 1)
        try:
            fields = dict(item.split('=', 1) for item in header[2:])
            dim, bits = int(fields['dim']), int(fields['bits'])
        except (KeyError, ValueError):
            raise ParseError(f"некорректный заголовок модели в {path}", 1)
        theta = np.zeros(dim)
        for line_number, line in enumerate(handle, start=2):
            parts = line.split()
            try:
                index, value = int(parts[0]), float(parts[1])
            except (IndexError, ValueError):
                raise ParseError(f"некорректная строка модели {line.strip()!r}", line_number)
            if len(parts) != 2 or not 0 <= index < dim:
                raise ParseError(f"некорректная строка модели {line.strip()!r}", line_number)
            theta[index] = value
    return theta, bits


def write_summary(summary: dict, path: Optional[str]):
    """JSON-сводка: в файл (одна строка) и в stdout"""
    line = json.dumps(summary, ensure_ascii=False)
    if path:
        with atomic_writer(path) as handle:
            handle.write(line + '\n')
    print(line)


@contextmanager
def trace_sink(path: Optional[str]):
    """Файл трассы (атомарно) или stdout"""
    if path:
        with atomic_writer(path) as handle:
            yield handle
    else:
        yield sys.stdout


# === КОМАНДЫ ===

def cmd_train(cfg: Config) -> int:
    """Полное обучение L-BFGS на всех батчах"""
    stream = read_batch_dir(cfg.batch_dir, cfg.dim)
    started = time.perf_counter()
    cost_cfg = cfg.cost_config()
    theta0 = np.zeros(stream.dim)
    if cfg.online_warm_start != 'none':
        theta0 = first_pass(stream, cfg.online_warm_start, cost_cfg, cfg.online_config())
    oracle = CostFunction(stream.batches, cost_cfg, shards=cfg.shards, threads=cfg.threads)
    result = minimize(oracle, theta0, None, cfg.lbfgs_config())
    seconds = time.perf_counter() - started

    write_model(result.theta, cfg.model_out, cfg.hash_bits)
    summary = cfg.as_summary()
    summary.update({
        'dim': stream.dim,
        'batches': len(stream),
        'examples': stream.total_examples,
        'iterations': result.iterations,
        'grad_evals': result.grad_evals,
        'final_cost': result.final_cost,
        'converged': result.converged,
        'seconds': seconds,
    })
    write_summary(summary, cfg.summary_out)
    return EXIT_OK


def _sampling_seeds(cfg: Config, time_index: int) -> List[int]:
    k = cfg.parallel_samplings
    return [cfg.seed * 1_000_003 + time_index * k + i for i in range(k)]


def cmd_stream(cfg: Config) -> int:
    """Адаптивное переобучение по потоку с трассой по батчам"""
    stream = read_batch_dir(cfg.batch_dir, cfg.dim)
    driver_cfg = cfg.driver_config()
    samplings = []

    def sample_in_parallel(state: DriverState, batch: Batch):
        if state.t < 0:
            return
        _, sizes = trigger_decision(state, batch, driver_cfg)
        if sizes is not None:
            report = parallel_samplings(state, batch, _sampling_seeds(cfg, batch.time_index), driver_cfg, sizes)
            samplings.append({
                't': batch.time_index,
                'dispersion': report.dispersion,
                'consistent': report.consistent,
                'held_out_errors': list(report.held_out_errors),
            })

    started = time.perf_counter()
    with trace_sink(cfg.trace_out) as trace:
        def write_record(record: BatchRecord):
            trace.write(record.to_line(cfg.timings) + '\n')
            trace.flush()

        state, _ = run_stream(
            stream,
            driver_cfg,
            on_record=write_record,
            before_batch=sample_in_parallel if cfg.parallel_samplings > 1 else None,
        )
    seconds = time.perf_counter() - started

    write_model(state.theta, cfg.model_out, cfg.hash_bits)
    summary = cfg.as_summary()
    summary.update({
        'dim': stream.dim,
        'batches': len(stream),
        'examples': stream.total_examples,
        'retrains': state.retrains,
        'grad_evals': state.grad_evals,
        'final_mismatch': state.history.last,
        'seconds': seconds,
    })
    if samplings:
        summary['parallel_samplings'] = samplings
    write_summary(summary, cfg.summary_out)
    return EXIT_OK


def _eval_batches(cfg: Config, dim: int) -> List[Batch]:
    if cfg.data_path:
        return [Batch.from_examples(0, read_examples(cfg.data_path), dim)]
    return list(read_batch_dir(cfg.batch_dir, dim))


def cmd_eval(cfg: Config) -> int:
    """AUC и доли ошибок модели на данных"""
    theta, _ = read_model(cfg.model_in)
    batches = _eval_batches(cfg, theta.shape[0])
    scored = score_set(theta, batches, cfg.mismatch_link)
    metrics = {
        'auc': auc(scored),
        'error_absolute': error_rate(theta, batches, 'absolute', cfg.mismatch_link),
        'error_thresholded': error_rate(theta, batches, 'thresholded', cfg.mismatch_link),
        'examples': sum(b.size for b in batches),
    }
    if cfg.check:
        metrics['auc_brute_force'] = brute_force_auc(scored)
        if metrics['auc_brute_force'] != metrics['auc']:
            logger.warning(f"⚠️ AUC расходится с прямым подсчётом: {metrics['auc']} vs {metrics['auc_brute_force']}")
    print(' '.join(f"{key}={value!r}" for key, value in metrics.items()))
    if cfg.summary_out:
        with atomic_writer(cfg.summary_out) as handle:
            handle.write(json.dumps(metrics) + '\n')
    return EXIT_OK


def cmd_synth(cfg: Config) -> int:
    """Синтетический поток с дрейфом в каталог батчей"""
    stream = generate_drift_stream(cfg.drift_spec())
    write_batch_dir(stream, cfg.batch_dir)
    return EXIT_OK


def cmd_ls_stream(cfg: Config) -> int:
    """МНК с забыванием: θ_t и ошибка подгонки по батчам"""
    stream = read_batch_dir(cfg.batch_dir, cfg.dim)
    if stream.dim > MAX_DENSE_DIM:
        raise ConfigurationError(f"Плотный МНК ограничен l ≤ {MAX_DENSE_DIM}, получено {stream.dim}")
    steps = least_squares_stream((dense_design(b) for b in stream), cfg.forget_weight(), ridge=cfg.ridge)
    with trace_sink(cfg.trace_out) as trace:
        for step in steps:
            theta_text = ','.join(repr(float(v)) for v in step.theta)
            trace.write(
                f"t={step.t} fit_error={step.fit_error!r} ridge={'true' if cfg.ridge else 'false'} theta={theta_text}\n"
            )
            trace.flush()
    return EXIT_OK


def cmd_online(cfg: Config) -> int:
    """Онлайн-базлайн (OGD/ADAGRAD) и его сожаление относительно θ*"""
    stream = read_batch_dir(cfg.batch_dir, cfg.dim)
    cost_cfg = cfg.cost_config()
    run = run_online(stream, cfg.learner, cost_cfg, cfg.online_config())
    # батч s оценивается параметрами, полученными до него
    predictive = [np.zeros(stream.dim)] + run.batch_thetas[:-1]
    theta_star = oracle_theta_star(stream.batches, cost_cfg, shards=cfg.shards, threads=cfg.threads)
    report = regret(predictive, stream.batches, cost_cfg, theta_star)
    averages = average_regret(report)

    with trace_sink(cfg.trace_out) as trace:
        for t, (cumulative, average) in enumerate(zip(report.cumulative.tolist(), averages.tolist())):
            trace.write(f"t={t} regret={cumulative!r} average_regret={average!r}\n")
            trace.flush()
    if cfg.model_out:
        write_model(run.theta, cfg.model_out, cfg.hash_bits)
    summary = cfg.as_summary()
    summary.update({
        'learner': cfg.learner,
        'examples': len(run.losses),
        'final_regret': float(report.cumulative[-1]),
        'mean_loss': float(np.mean(run.losses)),
    })
    write_summary(summary, cfg.summary_out)
    return EXIT_OK


def cmd_hash(cfg: Config) -> int:
    """Именованные признаки -> индексированный файл"""
    with Path(cfg.input_path).open('r', encoding='utf-8') as handle:
        examples = hash_lines(handle, cfg.hash_config())
    if not examples:
        raise EmptyDataError(f"Файл {cfg.input_path} не содержит записей")
    write_examples(examples, cfg.output_path)
    logger.info(f"Хешировано {len(examples)} записей в {cfg.output_path}")
    return EXIT_OK


def cmd_ctr(cfg: Config) -> int:
    """CTR-таблица по кликам и показам"""
    with Path(cfg.input_path).open('r', encoding='utf-8') as handle:
        records = parse_ctr_records(handle)
    write_ctr_table(aggregate_ctr(records, cfg.ctr_alpha, cfg.ctr_beta), cfg.output_path)
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'stream': cmd_stream,
    'eval': cmd_eval,
    'synth': cmd_synth,
    'ls-stream': cmd_ls_stream,
    'online': cmd_online,
    'hash': cmd_hash,
    'ctr': cmd_ctr,
}


# === РАЗБОР ФЛАГОВ ===

def _common_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--threads', type=int, default=1)
    common.add_argument('--shards', type=int, default=8)
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], type=str.upper)
    common.add_argument('--log-file')
    return common


def _model_flags(parser: ArgumentParser):
    parser.add_argument('--batch-dir')
    parser.add_argument('--model-out')
    parser.add_argument('--summary-out')
    parser.add_argument('--loss', choices=['logistic', 'squared'], default='logistic')
    parser.add_argument('--l2', type=float, default=0.0)
    parser.add_argument('--memory', type=int, default=10)
    parser.add_argument('--max-iters', type=int, default=100)
    parser.add_argument('--grad-tol', type=float, default=1e-6)
    parser.add_argument('--hash-bits', type=int)
    parser.add_argument('--dim', type=int)
    parser.add_argument('--online-warm-start', choices=['none', 'ogd', 'adagrad'], default='none')
    parser.add_argument('--eta', type=float, default=0.1)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='salbfgs', description='Адаптивное обучение линейных моделей на потоке батчей')
    common = _common_parser()
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', parents=[common], help='полное обучение L-BFGS')
    _model_flags(train)

    stream = commands.add_parser('stream', parents=[common], help='адаптивное переобучение по потоку')
    _model_flags(stream)
    stream.add_argument('--trace-out')
    stream.add_argument('--m-max', type=int, default=100_000)
    stream.add_argument('--m-old-min', type=int, default=100)
    stream.add_argument('--reservoir', type=int, default=1_000_000)
    stream.add_argument('--exact-mismatch', action='store_true')
    stream.add_argument('--mismatch-mode', choices=['absolute', 'thresholded'], default='absolute')
    stream.add_argument('--mismatch-link', choices=['identity', 'logistic'], default='identity')
    stream.add_argument('--reset-memory', action='store_true')
    stream.add_argument('--reweight', action='store_true')
    stream.add_argument('--parallel-samplings', type=int, default=1)
    stream.add_argument('--timings', action='store_true')

    evaluate = commands.add_parser('eval', parents=[common], help='AUC и доли ошибок')
    evaluate.add_argument('--model-in')
    evaluate.add_argument('--data')
    evaluate.add_argument('--batch-dir')
    evaluate.add_argument('--summary-out')
    evaluate.add_argument('--mismatch-link', choices=['identity', 'logistic'], default='identity')
    evaluate.add_argument('--check', action='store_true')

    synth = commands.add_parser('synth', parents=[common], help='синтетический поток с дрейфом')
    synth.add_argument('--batch-dir')
    synth.add_argument('--dim', type=int, default=50)
    synth.add_argument('--batches', type=int, default=10)
    synth.add_argument('--batch-size', type=int, default=1000)
    synth.add_argument('--sparsity', type=int, default=10)
    synth.add_argument('--drift-at', type=int, action='append', default=[])
    synth.add_argument('--drift-fraction', type=float, default=0.5)
    synth.add_argument('--theta-scale', type=float, default=1.0)

    ls_stream = commands.add_parser('ls-stream', parents=[common], help='МНК с забыванием')
    ls_stream.add_argument('--batch-dir')
    ls_stream.add_argument('--dim', type=int)
    ls_stream.add_argument('--mu', type=float, default=1.0)
    ls_stream.add_argument('--ridge', action='store_true')
    ls_stream.add_argument('--trace-out')

    online = commands.add_parser('online', parents=[common], help='онлайн-базлайны и сожаление')
    _model_flags(online)
    online.add_argument('--learner', choices=['ogd', 'adagrad'], default='ogd')
    online.add_argument('--schedule', choices=['sqrt', 'constant'], default='sqrt')
    online.add_argument('--trace-out')

    hashing = commands.add_parser('hash', parents=[common], help='хеширование именованных признаков')
    hashing.add_argument('--input')
    hashing.add_argument('--output')
    hashing.add_argument('--hash-bits', type=int, default=18)
    hashing.add_argument('--conjunction', action='append', default=[])

    ctr = commands.add_parser('ctr', parents=[common], help='нормализованная CTR-таблица')
    ctr.add_argument('--input')
    ctr.add_argument('--output')
    ctr.add_argument('--ctr-alpha', type=float, default=0.05)
    ctr.add_argument('--ctr-beta', type=float, default=75.0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Разбор флагов, запуск команды и отображение ошибок в коды выхода"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)

    try:
        cfg = load_config(args)
        logger.info(f"🚀 Команда {cfg.command}")
        code = COMMANDS[cfg.command](cfg)
        logger.info(f"✅ Команда {cfg.command} завершена")
        return code
    except SequencingError as e:
        logger.error(f"❌ Нарушен порядок батчей: {e}")
        return EXIT_SEQUENCING
    except UndefinedMetricError as e:
        logger.error(f"❌ {e}")
        return EXIT_UNDEFINED_AUC
    except (LineSearchError, OptimizationInputError, SingularMatrixError, NumericError) as e:
        logger.error(f"❌ Сбой оптимизации: {e}")
        return EXIT_OPTIMIZER
    except (OSError, ParseError, EmptyDataError, EmptyTableError, DimensionMismatchError) as e:
        logger.error(f"❌ Ошибка входных данных: {e}")
        return EXIT_IO
    except ValueError as e:
        logger.error(f"❌ Некорректная конфигурация: {e}")
        return EXIT_BAD_FLAGS


if __name__ == '__main__':
    sys.exit(main())

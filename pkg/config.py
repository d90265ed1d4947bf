import os
import sys
from argparse import Namespace
from typing import Callable, List, Optional, Tuple

from loguru import logger

from adaptive_least_squares import ForgetWeight
from core_model import CostConfig
from ingestion import DriftSpec, HashConfig
from lbfgs_optimizer import LbfgsConfig
from online_baselines import OnlineConfig
from sa_driver import DriverConfig, SamplerConfig

MAX_DENSE_DIM = 10_000


class ConfigurationError(ValueError):
    """Некорректный флаг командной строки"""


class Config:
    """Конфигурация запуска, собранная из флагов командной строки"""

    def __init__(self, args: Namespace):
        self._args = args
        self._setup_logging()
        self._validate_required_args()
        logger.debug(f"Конфигурация команды {self.command} загружена")

    def _get(self, name: str, default=None):
        value = getattr(self._args, name, None)
        return default if value is None else value

    # === COMMAND ===
    @property
    def command(self) -> str:
        return self._get('command', '')

    # === PATHS ===
    @property
    def batch_dir(self) -> Optional[str]:
        """Каталог batch_00000.txt, … (вход или выход synth)"""
        return self._get('batch_dir')

    @property
    def data_path(self) -> Optional[str]:
        """Файл примеров для eval"""
        return self._get('data')

    @property
    def model_in(self) -> Optional[str]:
        return self._get('model_in')

    @property
    def model_out(self) -> Optional[str]:
        return self._get('model_out')

    @property
    def trace_out(self) -> Optional[str]:
        """Файл трассы; по умолчанию <model-out>.trace"""
        explicit = self._get('trace_out')
        if explicit or not self.model_out:
            return explicit
        return self.model_out + '.trace'

    @property
    def summary_out(self) -> Optional[str]:
        """Файл итоговой JSON-сводки; по умолчанию <model-out>.summary"""
        explicit = self._get('summary_out')
        if explicit or not self.model_out:
            return explicit
        return self.model_out + '.summary'

    @property
    def input_path(self) -> Optional[str]:
        return self._get('input')

    @property
    def output_path(self) -> Optional[str]:
        return self._get('output')

    # === COST SETTINGS ===
    @property
    def loss(self) -> str:
        return self._get('loss', 'logistic')

    @property
    def l2(self) -> float:
        """Вес λ регуляризатора ½‖θ‖²"""
        return float(self._get('l2', 0.0))

    # === L-BFGS SETTINGS ===
    @property
    def memory(self) -> int:
        return int(self._get('memory', 10))

    @property
    def max_iters(self) -> int:
        return int(self._get('max_iters', 100))

    @property
    def grad_tol(self) -> float:
        return float(self._get('grad_tol', 1e-6))

    @property
    def reset_memory(self) -> bool:
        return bool(self._get('reset_memory', False))

    # === SAMPLER SETTINGS ===
    @property
    def m_max(self) -> int:
        return int(self._get('m_max', 100_000))

    @property
    def m_old_min(self) -> int:
        return int(self._get('m_old_min', 100))

    @property
    def reservoir(self) -> Optional[int]:
        """Ёмкость резервуара; None в точном режиме"""
        if self.exact_mismatch:
            return None
        return int(self._get('reservoir', 1_000_000))

    @property
    def exact_mismatch(self) -> bool:
        return bool(self._get('exact_mismatch', False))

    @property
    def reweight(self) -> bool:
        return bool(self._get('reweight', False))

    @property
    def parallel_samplings(self) -> int:
        return int(self._get('parallel_samplings', 1))

    # === MISMATCH SETTINGS ===
    @property
    def mismatch_mode(self) -> str:
        return self._get('mismatch_mode', 'absolute')

    @property
    def mismatch_link(self) -> str:
        return self._get('mismatch_link', 'identity')

    # === ONLINE SETTINGS ===
    @property
    def learner(self) -> str:
        return self._get('learner', 'ogd')

    @property
    def eta(self) -> float:
        return float(self._get('eta', 0.1))

    @property
    def schedule(self) -> str:
        return self._get('schedule', 'sqrt')

    @property
    def online_warm_start(self) -> str:
        return self._get('online_warm_start', 'none')

    # === LEAST SQUARES SETTINGS ===
    @property
    def mu(self) -> float:
        return float(self._get('mu', 1.0))

    @property
    def ridge(self) -> bool:
        return bool(self._get('ridge', False))

    # === HASHING SETTINGS ===
    @property
    def hash_bits(self) -> Optional[int]:
        bits = self._get('hash_bits')
        return None if bits is None else int(bits)

    @property
    def conjunctions(self) -> List[Tuple[str, str]]:
        """Пары пространств имён `a,b` из --conjunction"""
        pairs = []
        for spec in self._get('conjunction', []):
            first, comma, second = spec.partition(',')
            if not comma:
                raise ConfigurationError(f"--conjunction ожидает `ns1,ns2`, получено {spec!r}")
            pairs.append((first, second))
        return pairs

    @property
    def ctr_alpha(self) -> float:
        return float(self._get('ctr_alpha', 0.05))

    @property
    def ctr_beta(self) -> float:
        return float(self._get('ctr_beta', 75.0))

    # === SYNTH SETTINGS ===
    @property
    def dim(self) -> Optional[int]:
        """Размерность модели; по умолчанию 2^bits или наибольший индекс + 1"""
        dim = self._get('dim')
        if dim is not None:
            return int(dim)
        if self.hash_bits is not None:
            return 1 << self.hash_bits
        return None

    @property
    def batches(self) -> int:
        return int(self._get('batches', 10))

    @property
    def batch_size(self) -> int:
        return int(self._get('batch_size', 1000))

    @property
    def sparsity(self) -> int:
        return int(self._get('sparsity', 10))

    @property
    def drift_at(self) -> List[int]:
        return [int(t) for t in self._get('drift_at', [])]

    @property
    def drift_fraction(self) -> float:
        return float(self._get('drift_fraction', 0.5))

    @property
    def theta_scale(self) -> float:
        return float(self._get('theta_scale', 1.0))

    # === EXECUTION SETTINGS ===
    @property
    def seed(self) -> int:
        return int(self._get('seed', 0))

    @property
    def threads(self) -> int:
        return int(self._get('threads', 1))

    @property
    def shards(self) -> int:
        return int(self._get('shards', 8))

    @property
    def timings(self) -> bool:
        """Писать измеренное время в трассу"""
        return bool(self._get('timings', False))

    @property
    def check(self) -> bool:
        return bool(self._get('check', False))

    # === LOGGING SETTINGS ===
    @property
    def log_level(self) -> str:
        return str(self._get('log_level', 'INFO')).upper()

    @property
    def log_format(self) -> str:
        return '{time:YYYY-MM-DD HH:mm:ss} | {level} | {name}:{function}:{line} | {message}'

    @property
    def log_file(self) -> Optional[str]:
        return self._get('log_file')

    # === МОДУЛЬНЫЕ НАСТРОЙКИ ===
    def cost_config(self) -> CostConfig:
        return CostConfig(loss_kind=self.loss, reg_kind='l2' if self.l2 > 0 else 'none', reg_strength=self.l2)

    def lbfgs_config(self) -> LbfgsConfig:
        return LbfgsConfig(max_iterations=self.max_iters, grad_tolerance=self.grad_tol, memory_size=self.memory)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            m_max=self.m_max, m_old_min=self.m_old_min, reservoir_capacity=self.reservoir, seed=self.seed
        )

    def online_config(self) -> OnlineConfig:
        return OnlineConfig(eta=self.eta, schedule=self.schedule)

    def driver_config(self) -> DriverConfig:
        return DriverConfig(
            cost=self.cost_config(),
            lbfgs=self.lbfgs_config(),
            sampler=self.sampler_config(),
            mismatch_mode=self.mismatch_mode,
            mismatch_link=self.mismatch_link,
            reset_memory=self.reset_memory,
            reweight=self.reweight,
            warm_start=self.online_warm_start,
            online_eta=self.eta,
            shards=self.shards,
            threads=self.threads,
        )

    def hash_config(self) -> HashConfig:
        return HashConfig(bits=self.hash_bits if self.hash_bits is not None else 18, conjunctions=tuple(self.conjunctions))

    def drift_spec(self) -> DriftSpec:
        return DriftSpec(
            dim=self.dim if self.dim is not None else 50,
            batches=self.batches,
            batch_size=self.batch_size,
            sparsity=self.sparsity,
            drifts=tuple((t, self.drift_fraction) for t in self.drift_at),
            theta_scale=self.theta_scale,
            seed=self.seed,
        )

    def forget_weight(self) -> ForgetWeight:
        return ForgetWeight(self.mu)

    # === МЕТОДЫ ВАЛИДАЦИИ ===
    def _validate_required_args(self):
        """Проверка обязательных путей для команды"""
        required = {
            'train': {'--batch-dir': self.batch_dir, '--model-out': self.model_out},
            'stream': {'--batch-dir': self.batch_dir, '--model-out': self.model_out},
            'eval': {'--model-in': self.model_in},
            'synth': {'--batch-dir': self.batch_dir},
            'ls-stream': {'--batch-dir': self.batch_dir},
            'online': {'--batch-dir': self.batch_dir},
            'hash': {'--input': self.input_path, '--output': self.output_path},
            'ctr': {'--input': self.input_path, '--output': self.output_path},
        }.get(self.command, {})

        missing = [flag for flag, value in required.items() if not value]
        if self.command == 'eval' and not (self.data_path or self.batch_dir):
            missing.append('--data/--batch-dir')
        if missing:
            error_msg = f"Отсутствуют обязательные флаги: {', '.join(missing)}"
            logger.error(error_msg)
            raise ConfigurationError(error_msg)

    def _setup_logging(self):
        """Настройка логирования"""
        logger.remove()

        # stdout занят результатами команд
        logger.add(
            sink=sys.stderr,
            format=self.log_format,
            level=self.log_level,
            colorize=sys.stderr.isatty(),
        )

        if self.log_file:
            directory = os.path.dirname(self.log_file)
            if directory:
                os.makedirs(directory, exist_ok=True)
            logger.add(
                sink=self.log_file,
                format=self.log_format,
                level=self.log_level,
                rotation="1 day",
                retention="7 days",
                compression="zip",
            )

    def _checks(self) -> List[Tuple[str, Callable[[], object]]]:
        checks: List[Tuple[str, Callable[[], object]]] = [
            ('--threads/--shards', self._check_workers),
            ('--loss/--l2', self.cost_config),
            ('--memory/--max-iters/--grad-tol', self.lbfgs_config),
        ]
        if self.command == 'stream':
            checks += [
                ('--m-max/--m-old-min/--reservoir', self.sampler_config),
                ('--mismatch-mode/--mismatch-link/--online-warm-start', self.driver_config),
                ('--parallel-samplings', self._check_parallel_samplings),
            ]
        if self.command in ('online', 'train', 'stream'):
            checks.append(('--eta/--schedule', self.online_config))
        if self.command == 'synth':
            checks.append(('--dim/--batches/--batch-size/--sparsity/--drift-at/--drift-fraction', self.drift_spec))
        if self.command == 'ls-stream':
            checks.append(('--mu', self.forget_weight))
            checks.append(('--dim', self._check_dense_dim))
        if self.command == 'hash' or self.hash_bits is not None:
            checks.append(('--hash-bits/--conjunction', self.hash_config))
        if self.command == 'ctr':
            checks.append(('--ctr-alpha/--ctr-beta', self._check_ctr_smoothing))
        return checks

    def _check_workers(self):
        if self.threads < 1 or self.shards < 1:
            raise ValueError(f"нужно ≥ 1, получено threads={self.threads}, shards={self.shards}")

    def _check_parallel_samplings(self):
        if self.parallel_samplings < 1:
            raise ValueError(f"нужно ≥ 1, получено {self.parallel_samplings}")

    def _check_dense_dim(self):
        if self.dim is not None and self.dim > MAX_DENSE_DIM:
            raise ValueError(f"плотный путь ограничен l ≤ {MAX_DENSE_DIM}, получено {self.dim}")

    def _check_ctr_smoothing(self):
        if self.ctr_alpha <= 0 or self.ctr_beta <= 0:
            raise ValueError(f"сглаживание должно быть положительным: α={self.ctr_alpha}, β={self.ctr_beta}")

    def validate_configuration(self) -> bool:
        """Валидация всех числовых флагов через конфигурации модулей"""
        valid = True
        for flags, build in self._checks():
            try:
                build()
            except ValueError as e:
                logger.error(f"Некорректное значение {flags}: {e}")
                valid = False
        if valid:
            logger.debug("Конфигурация прошла валидацию")
        return valid

    def as_summary(self) -> dict:
        """Ключевые настройки запуска для JSON-сводки"""
        return {
            'command': self.command,
            'loss': self.loss,
            'l2': self.l2,
            'memory': self.memory,
            'max_iters': self.max_iters,
            'grad_tol': self.grad_tol,
            'seed': self.seed,
            'threads': self.threads,
            'shards': self.shards,
        }

    def print_configuration(self):
        """Вывод текущей конфигурации в лог (уровень DEBUG)"""
        config_info = {
            'Cost': {'Loss': self.loss, 'L2': self.l2},
            'L-BFGS': {'Memory': self.memory, 'Max Iterations': self.max_iters, 'Grad Tolerance': self.grad_tol},
            'Sampler': {
                'M max': self.m_max,
                'M old min': self.m_old_min,
                'Reservoir': self.reservoir if self.reservoir is not None else 'exact',
                'Mismatch': f"{self.mismatch_mode}/{self.mismatch_link}",
            },
            'Execution': {'Seed': self.seed, 'Threads': self.threads, 'Shards': self.shards},
        }

        logger.debug(f"=== КОНФИГУРАЦИЯ: {self.command} ===")
        for section, settings in config_info.items():
            logger.debug(f"[{section}]")
            for key, value in settings.items():
                logger.debug(f"  {key}: {value}")


# Глобальный экземпляр конфигурации
config = None


def get_config() -> Config:
    """Получить глобальный экземпляр конфигурации"""
    if config is None:
        raise RuntimeError("Конфигурация ещё не загружена (нужен load_config)")
    return config


def load_config(args: Namespace) -> Config:
    """Загрузить и валидировать конфигурацию"""
    global config
    cfg = Config(args)

    if not cfg.validate_configuration():
        raise ConfigurationError("Конфигурация содержит ошибки")

    if cfg.log_level == 'DEBUG':
        cfg.print_configuration()
    config = cfg
    return cfg

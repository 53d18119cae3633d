"""
Базовые примитивы: активации, позиционные кодировки, ошибки, потоки случайных чисел
"""
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Union

import numpy as np
import pytz

import config

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ArrayLike = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# Ошибки
# ---------------------------------------------------------------------------

class PosAttnError(Exception):
    """Базовая ошибка библиотеки"""


class ValidationError(PosAttnError, ValueError):
    """Нарушено предусловие; key - имя параметра, если известно"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DimensionError(ValidationError):
    """Несогласованные размеры матриц"""


class DomainError(ValidationError):
    """Аргумент вне области определения"""


class ConfigError(ValidationError):
    """Некорректная конфигурация запуска"""


class TeacherIndexError(ValidationError, IndexError):
    """Индекс позиции вне диапазона [1, D]"""


class NumericError(PosAttnError, ArithmeticError):
    """Численный сбой: нечисловые значения или расходимость"""


# ---------------------------------------------------------------------------
# Активации
# ---------------------------------------------------------------------------

ACTIVATION_KINDS = ('identity', 'relu', 'leaky_relu')

# Синонимы, принимаемые из CLI и файлов конфигурации
_ACTIVATION_ALIASES = {
    'identity': 'identity',
    'linear': 'identity',
    'relu': 'relu',
    'leaky': 'leaky_relu',
    'leaky_relu': 'leaky_relu',
}


@dataclass(frozen=True)
class ActivationKind:
    """Вид активации; kappa задается только для leaky_relu"""
    kind: str
    kappa: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValidationError(f"Неизвестная активация: '{self.kind}'", key='act')
        if self.kind == 'leaky_relu':
            if self.kappa is None or not (0.0 < self.kappa < 1.0):
                raise DomainError(f"kappa должно быть в (0, 1), получено {self.kappa}", key='kappa')
        elif self.kappa is not None:
            raise ValidationError(f"kappa задается только для leaky_relu (получено для '{self.kind}')",
                                  key='kappa')

    @staticmethod
    def parse(name: str, kappa: Optional[float] = None) -> 'ActivationKind':
        """Построить активацию из имени (identity / relu / leaky)"""
        kind = _ACTIVATION_ALIASES.get(str(name).strip().lower())
        if kind is None:
            raise ValidationError(f"Неизвестная активация: '{name}'", key='act')
        if kind != 'leaky_relu':
            kappa = None
        return ActivationKind(kind, kappa)

    @property
    def short_name(self) -> str:
        return 'leaky' if self.kind == 'leaky_relu' else self.kind

    def __str__(self) -> str:
        if self.kind == 'leaky_relu':
            return f"leaky(kappa={self.kappa:g})"
        return self.kind


IDENTITY = ActivationKind('identity')
RELU = ActivationKind('relu')


def leaky(kappa: float) -> ActivationKind:
    return ActivationKind('leaky_relu', kappa)


def _unwrap(x: np.ndarray, scalar: bool) -> ArrayLike:
    return float(x) if scalar else x


def apply_activation(x: ArrayLike, act: ActivationKind) -> ArrayLike:
    """
    σ(x) поэлементно: identity -> x; relu -> max(x, 0); leaky -> x при x >= 0, иначе κx
    """
    scalar = np.ndim(x) == 0
    arr = np.asarray(x, dtype=float)
    if act.kind == 'identity':
        out = arr.copy()
    elif act.kind == 'relu':
        out = np.where(arr >= 0.0, arr, 0.0)
    else:
        out = np.where(arr >= 0.0, arr, act.kappa * arr)
    return _unwrap(out, scalar)


def activation_derivative(x: ArrayLike, act: ActivationKind) -> ArrayLike:
    """
    σ'(x) поэлементно; в нуле берется ветвь x >= 0, то есть σ'(0) = 1
    """
    scalar = np.ndim(x) == 0
    arr = np.asarray(x, dtype=float)
    if act.kind == 'identity':
        out = np.ones_like(arr)
    elif act.kind == 'relu':
        out = np.where(arr >= 0.0, 1.0, 0.0)
    else:
        out = np.where(arr >= 0.0, 1.0, act.kappa)
    return _unwrap(out, scalar)


def c_sigma(act: ActivationKind) -> float:
    """c_σ = E[σ(x)²]/a для x ~ N(0, a): 1, 1/2 или (1+κ²)/2"""
    if act.kind == 'identity':
        return 1.0
    if act.kind == 'relu':
        return 0.5
    return (1.0 + act.kappa ** 2) / 2.0


# ---------------------------------------------------------------------------
# Позиционные кодировки
# ---------------------------------------------------------------------------

ENCODING_SCHEMES = ('identity', 'random_orthogonal')


@dataclass(frozen=True, eq=False)
class PositionalEncoding:
    """Ортогональная матрица позиций P (D×D)"""
    P: np.ndarray = field(repr=False)
    scheme: str = 'identity'
    seed: int = 0

    @property
    def D(self) -> int:
        return self.P.shape[0]


def make_positional_encoding(D: int, scheme: str = 'identity', seed: int = 0) -> PositionalEncoding:
    """
    Построение P: identity -> I_D; random_orthogonal -> QR гауссовой матрицы
    с положительной диагональю R (детерминировано по seed)
    """
    if int(D) < 2:
        raise DimensionError(f"D должно быть >= 2, получено {D}", key='D')
    D = int(D)
    if scheme == 'identity':
        P = np.eye(D)
    elif scheme == 'random_orthogonal':
        rng = make_rng(seed, 'encoding')
        Q, R = np.linalg.qr(rng.standard_normal((D, D)))
        signs = np.sign(np.diag(R))
        signs[signs == 0] = 1.0
        P = Q * signs
    else:
        raise ValidationError(f"Неизвестная схема кодировки: '{scheme}'", key='encoding')
    P.setflags(write=False)
    return PositionalEncoding(P=P, scheme=scheme, seed=int(seed))


# ---------------------------------------------------------------------------
# Случайные потоки
# ---------------------------------------------------------------------------

# Назначения подпотоков: один мастер-сид делится по назначению
SEED_PURPOSES = {
    'inputs': 1,
    'noise': 2,
    'mc': 3,
    'encoding': 4,
    'ood': 5,
    'teacher': 6,
    'ood_noise': 7,
}


def make_rng(seed: int, purpose: str, *substream: int) -> np.random.Generator:
    """
    Генератор для (seed, назначение, подпоток...); разные назначения независимы
    """
    if purpose not in SEED_PURPOSES:
        raise ValidationError(f"Неизвестное назначение потока: '{purpose}'", key='purpose')
    key = (SEED_PURPOSES[purpose],) + tuple(int(s) for s in substream)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# ---------------------------------------------------------------------------
# Проверки и вывод
# ---------------------------------------------------------------------------

def check_finite(arr: np.ndarray, what: str) -> None:
    """NumericError, если в массиве есть inf/nan"""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"Нечисловые значения в {what}")


def format_float(value: float) -> str:
    """Число с 17 значащими цифрами (однозначное восстановление)"""
    return f"{float(value):.{config.CSV_DIGITS}g}"


def atomic_write_text(path: str, text: str) -> str:
    """Запись файла через временный файл и переименование"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp_', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise ValidationError(f"Не удалось записать {path}: {e}", key='out')
    return path


def atomic_target(path: str) -> str:
    """Временный путь рядом с path для инструментов, пишущих файл сами (openpyxl)"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, f".tmp_{os.getpid()}_{os.path.basename(path)}")


def get_current_timestamp(timezone_str: str = config.TIMEZONE) -> str:
    """Текущее время в формате YYYY-MM-DD HH:MM:SS"""
    tz = pytz.timezone(timezone_str)
    return datetime.now(tz).strftime('%Y-%m-%d %H:%M:%S %Z')

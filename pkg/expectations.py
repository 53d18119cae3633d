"""
Замкнутые формы гауссовых ожиданий F1–F6 и Монте-Карло проверка

Для независимых x1 ~ N(0, a), x2 ~ N(0, b), x3 ~ N(0, c):
    F1(a)       = E[x1 σ(x1) σ'(x1)]
    F2(a, b)    = E[x1 σ(x1+x2) σ'(x1+x2)]
    F3(a, b)    = E[(x1+x2) σ(x1) σ'(x1+x2)]
    F4(a, b, c) = E[x1 σ(x1+x2) σ'(x1+x2+x3)]
    F5(a, b, c) = E[x2 σ(x1) σ'(x1+x2+x3)]
F6(C1, p, D, K) = E[σ(g/K) σ(C1(p g + q h))] − c_σ C1 p, g ~ N(0, K), h ~ N(0, D−K),
q = (1−Kp)/(D−K).

Для Leaky ReLU каждая величина равна κ·(значение для identity) + (1−κ)²·(значение для ReLU).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from utils import (IDENTITY, RELU, ActivationKind, DomainError, ValidationError, activation_derivative,
                   apply_activation, c_sigma, leaky, make_rng)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

EXPECTATIONS = ('F1', 'F2', 'F3', 'F4', 'F5', 'F6')

# Допуск на границы диапазона p (p = 1/K достигается только в пределе)
P_TOLERANCE = 1e-12


def _check_variances(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v) or v < 0:
            raise DomainError(f"{name}: дисперсии должны быть неотрицательны, получено {values}", key=name)


def _combine(act: ActivationKind, identity_value: float, relu_value: float) -> float:
    if act.kind == 'identity':
        return identity_value
    if act.kind == 'relu':
        return relu_value
    kappa = act.kappa
    return kappa * identity_value + (1.0 - kappa) ** 2 * relu_value


# ---------------------------------------------------------------------------
# Замкнутые формы
# ---------------------------------------------------------------------------

def F1(a: float, act: ActivationKind) -> float:
    """identity -> a; relu -> a/2; leaky -> (1+κ²)a/2"""
    _check_variances('F1', a)
    return _combine(act, a, a / 2.0)


def F2(a: float, b: float, act: ActivationKind) -> float:
    """Совпадает с F1(a), от b не зависит"""
    _check_variances('F2', a, b)
    return _combine(act, a, a / 2.0)


def F3(a: float, b: float, act: ActivationKind) -> float:
    """ReLU: a/4 + a/(2π)·arctan(√(a/b)) + √(ab)/(2π); при b = 0 предел a/2"""
    _check_variances('F3', a, b)
    sa, sb = math.sqrt(a), math.sqrt(b)
    relu_value = a / 4.0 + a / (2.0 * math.pi) * math.atan2(sa, sb) + sa * sb / (2.0 * math.pi)
    return _combine(act, a, relu_value)


def F4(a: float, b: float, c: float, act: ActivationKind) -> float:
    """ReLU: a/4 + a/(2π)·(arctan(√((a+b)/c)) + √((a+b)c)/(a+b+c))"""
    _check_variances('F4', a, b, c)
    total = a + b + c
    if a == 0.0:
        return 0.0
    sab, sc = math.sqrt(a + b), math.sqrt(c)
    relu_value = a / 4.0 + a / (2.0 * math.pi) * (math.atan2(sab, sc) + sab * sc / total)
    return _combine(act, a, relu_value)


def F5(a: float, b: float, c: float, act: ActivationKind) -> float:
    """identity -> 0; ReLU: b√(a(b+c))/(2π(a+b+c))"""
    _check_variances('F5', a, b, c)
    total = a + b + c
    if total == 0.0:
        raise DomainError("F5: все дисперсии равны нулю", key='F5')
    relu_value = b * math.sqrt(a * (b + c)) / (2.0 * math.pi * total)
    return _combine(act, 0.0, relu_value)


def check_p_range(p: float, D: int, K: int, key: str = 'p') -> None:
    if D <= K or K < 1:
        raise DomainError(f"Требуется D > K >= 1, получено D={D}, K={K}", key='K')
    if not (1.0 / D - P_TOLERANCE <= p <= 1.0 / K + P_TOLERANCE):
        raise DomainError(f"p={p} вне диапазона [1/D, 1/K] = [{1.0 / D}, {1.0 / K}]", key=key)


def F6(C1: float, p: float, D: int, K: int, act: ActivationKind) -> float:
    """
    ReLU: (C1/(2K))·[Kp(arctan(p√(K(D−K))/(1−Kp))/π − 1/2) + (1−Kp)√K/(π√(D−K))]
    """
    if C1 < 0:
        raise DomainError(f"C1 должно быть >= 0, получено {C1}", key='C1')
    check_p_range(p, D, K)
    x = max(1.0 - K * p, 0.0)
    angle = math.atan2(p * math.sqrt(K * (D - K)), x)
    relu_value = C1 / (2.0 * K) * (K * p * (angle / math.pi - 0.5)
                                   + x * math.sqrt(K) / (math.pi * math.sqrt(D - K)))
    return _combine(act, 0.0, relu_value)


# ---------------------------------------------------------------------------
# Подстановка дисперсий
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceArgs:
    """Аргументы F-функций на шаге динамики при данном p"""
    f1: float
    f21: Tuple[float, float]
    f22: Tuple[float, float]
    f3: Tuple[float, float]
    f4: Tuple[float, float, float]
    f5: Tuple[float, float, float]


def plug_variances(p: float, D: int, K: int) -> VarianceArgs:
    """Дисперсии аргументов F1, F2₁, F2₂, F3, F4, F5 при общем весе p"""
    check_p_range(p, D, K)
    x = max(1.0 - K * p, 0.0)
    off = x * x / (D - K)            # (1−Kp)²/(D−K)
    off_single = x * x / (D - K) ** 2  # (1−Kp)²/(D−K)²
    on = K * p * p
    return VarianceArgs(
        f1=on + off,
        f21=(p * p, (K - 1) * p * p + off),
        f22=(off_single, on + (D - K - 1) * off_single),
        f3=(on, off),
        f4=(p * p, (K - 1) * p * p, off),
        f5=(on, off_single, (D - K - 1) * off_single),
    )


def closed_form(which: str, args: Sequence[float], act: ActivationKind) -> float:
    """Диспетчер замкнутых форм по имени"""
    functions = {'F1': F1, 'F2': F2, 'F3': F3, 'F4': F4, 'F5': F5}
    if which == 'F6':
        C1, p, D, K = args
        return F6(C1, p, int(D), int(K), act)
    if which not in functions:
        raise ValidationError(f"Неизвестное ожидание: '{which}'", key='which')
    return functions[which](*args, act)


# ---------------------------------------------------------------------------
# Монте-Карло
# ---------------------------------------------------------------------------

_ARITY = {'F1': 1, 'F2': 2, 'F3': 2, 'F4': 3, 'F5': 3, 'F6': 4}


def _integrand(which: str, args: Sequence[float], act: ActivationKind, z: np.ndarray) -> np.ndarray:
    """Значения подынтегральной функции на стандартных нормальных z (строки - координаты)"""
    sigma = partial(apply_activation, act=act)
    dsigma = partial(activation_derivative, act=act)
    if which == 'F6':
        C1, p, D, K = args
        q = (1.0 - K * p) / (D - K)
        g = math.sqrt(K) * z[0]
        h = math.sqrt(D - K) * z[1]
        return sigma(g / K) * sigma(C1 * (p * g + q * h)) - c_sigma(act) * C1 * p
    x = [math.sqrt(v) * z[k] for k, v in enumerate(args)]
    if which == 'F1':
        return x[0] * sigma(x[0]) * dsigma(x[0])
    if which == 'F2':
        s = x[0] + x[1]
        return x[0] * sigma(s) * dsigma(s)
    if which == 'F3':
        s = x[0] + x[1]
        return s * sigma(x[0]) * dsigma(s)
    if which == 'F4':
        return x[0] * sigma(x[0] + x[1]) * dsigma(x[0] + x[1] + x[2])
    return x[1] * sigma(x[0]) * dsigma(x[0] + x[1] + x[2])


def _validate_mc_args(which: str, args: Sequence[float]) -> None:
    if which not in _ARITY:
        raise ValidationError(f"Неизвестное ожидание: '{which}'", key='which')
    if len(args) != _ARITY[which]:
        raise DomainError(f"{which}: ожидалось {_ARITY[which]} аргументов, получено {len(args)}", key='args')
    if which == 'F6':
        C1, p, D, K = args
        if C1 < 0:
            raise DomainError(f"C1 должно быть >= 0, получено {C1}", key='C1')
        check_p_range(p, int(D), int(K))
    else:
        _check_variances(which, *args)


def _chunk_moments(which: str, args: Sequence[float], act: ActivationKind, size: int, seed: int,
                   index: int, antithetic: bool) -> Tuple[int, float, float]:
    rng = make_rng(seed, 'mc', index)
    dims = 2 if which == 'F6' else _ARITY[which]
    if antithetic:
        z = rng.standard_normal((dims, max(size // 2, 1)))
        values = 0.5 * (_integrand(which, args, act, z) + _integrand(which, args, act, -z))
    else:
        z = rng.standard_normal((dims, size))
        values = _integrand(which, args, act, z)
    mean = float(values.mean())
    m2 = float(((values - mean) ** 2).sum())
    return values.size, mean, m2


def mc_expectation(which: str, args: Sequence[float], act: ActivationKind, n: int, seed: int,
                   antithetic: bool = False, threads: int = 1) -> Tuple[float, float]:
    """
    Несмещенная оценка ожидания и ее стандартная ошибка.
    Выборка режется на блоки с независимыми подпотоками; блоки сводятся в фиксированном
    порядке, поэтому результат не зависит от числа потоков.
    """
    if n < config.MC_MIN_SAMPLES:
        raise DomainError(f"n должно быть >= {config.MC_MIN_SAMPLES}, получено {n}", key='n')
    _validate_mc_args(which, args)
    sizes = [config.MC_CHUNK] * (n // config.MC_CHUNK)
    if n % config.MC_CHUNK:
        sizes.append(n % config.MC_CHUNK)

    def run(index: int) -> Tuple[int, float, float]:
        return _chunk_moments(which, args, act, sizes[index], seed, index, antithetic)

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        moments = list(pool.map(run, range(len(sizes))))

    count, mean, m2 = 0, 0.0, 0.0
    for n_b, mean_b, m2_b in moments:
        total = count + n_b
        delta = mean_b - mean
        mean += delta * n_b / total
        m2 += m2_b + delta * delta * count * n_b / total
        count = total
    variance = m2 / (count - 1) if count > 1 else 0.0
    return mean, math.sqrt(variance / count)


# ---------------------------------------------------------------------------
# Таблица проверки (verify-expectations)
# ---------------------------------------------------------------------------

DEFAULT_VERIFY_ACTIVATIONS = (IDENTITY, RELU, leaky(0.1))


def _random_args(which: str, rng: np.random.Generator) -> Tuple[float, ...]:
    if which == 'F6':
        D = int(rng.integers(6, 41))
        K = int(rng.integers(1, D // 2 + 1))
        p = float(rng.uniform(1.0 / D, 1.0 / K))
        return float(rng.uniform(0.01, 3.0)), p, D, K
    return tuple(float(v) for v in rng.uniform(0.01, 10.0, size=_ARITY[which]))


def verify_table(n: int, seed: int, tuples_per_case: int = 20,
                 activations: Optional[Sequence[ActivationKind]] = None,
                 functions: Sequence[str] = EXPECTATIONS, threads: int = 1) -> List[Dict]:
    """
    Сравнение замкнутых форм с Монте-Карло на случайных аргументах.
    Возвращает строки {F, act, arg1..arg4, closed_form, mc_estimate, se, z_score}
    """
    activations = activations or DEFAULT_VERIFY_ACTIVATIONS
    rows = []
    case = 0
    for which in functions:
        for act in activations:
            arg_rng = make_rng(seed, 'mc', 10_000 + case)
            for j in range(tuples_per_case):
                args = _random_args(which, arg_rng)
                exact = closed_form(which, args, act)
                estimate, se = mc_expectation(which, args, act, n, seed=seed * 1_000_003 + case * 1000 + j,
                                              threads=threads)
                z = (estimate - exact) / se if se > 0 else 0.0
                padded = list(args) + [''] * (4 - len(args))
                rows.append({
                    'F': which, 'act': act.short_name,
                    'arg1': padded[0], 'arg2': padded[1], 'arg3': padded[2], 'arg4': padded[3],
                    'closed_form': exact, 'mc_estimate': estimate, 'se': se, 'z_score': z,
                })
            case += 1
        logger.info(f"{which}: проверено {tuples_per_case * len(activations)} наборов аргументов")
    return rows

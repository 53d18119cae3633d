"""
Модель-ученик: позиционное внимание σ(W_V X S(Pᵀ W_KQ P / √D))
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

import config
from teachers import TeacherSpec
from utils import (IDENTITY, ActivationKind, DimensionError, DomainError, NumericError,
                   PositionalEncoding, apply_activation, make_positional_encoding)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass(eq=False)
class StudentParams:
    """Обучаемые W_V (M×d), W_KQ (D×D) и фиксированная кодировка P"""
    W_V: np.ndarray = field(repr=False)
    W_KQ: np.ndarray = field(repr=False)
    encoding: PositionalEncoding
    act: ActivationKind = IDENTITY

    @staticmethod
    def zeros(M: int, d: int, encoding: PositionalEncoding, act: ActivationKind = IDENTITY) -> 'StudentParams':
        """Нулевая инициализация W_V = 0, W_KQ = 0"""
        D = encoding.D
        return StudentParams(W_V=np.zeros((M, d)), W_KQ=np.zeros((D, D)), encoding=encoding, act=act)

    @property
    def D(self) -> int:
        return self.encoding.D

    def copy(self) -> 'StudentParams':
        return StudentParams(W_V=self.W_V.copy(), W_KQ=self.W_KQ.copy(), encoding=self.encoding, act=self.act)

    def check_compatible(self, teacher: TeacherSpec) -> None:
        """Размеры согласованы с учителем (M, d, D)"""
        if self.W_V.shape != (teacher.M, teacher.d):
            raise DimensionError(f"W_V: ожидалась форма {(teacher.M, teacher.d)}, получено {self.W_V.shape}",
                                 key='W_V')
        if self.W_KQ.shape != (teacher.D, teacher.D) or self.D != teacher.D:
            raise DimensionError(f"W_KQ: ожидалась форма {(teacher.D, teacher.D)}, получено {self.W_KQ.shape}",
                                 key='W_KQ')


def softmax_columns(logits: np.ndarray) -> np.ndarray:
    """Softmax по столбцам (по оси -2) с вычитанием максимума столбца"""
    if not np.all(np.isfinite(logits)):
        raise NumericError("Нечисловые логиты внимания")
    shifted = logits - logits.max(axis=-2, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-2, keepdims=True)


def attention_scores(W_KQ: np.ndarray, P: np.ndarray) -> np.ndarray:
    """
    S = softmax(Pᵀ W_KQ P / √D) по столбцам; каждый столбец суммируется в 1
    """
    W_KQ = np.asarray(W_KQ, dtype=float)
    P = np.asarray(P, dtype=float)
    D = P.shape[0]
    if W_KQ.shape != (D, D) or P.shape != (D, D):
        raise DimensionError(f"W_KQ и P должны быть {D}×{D}, получено {W_KQ.shape} и {P.shape}", key='W_KQ')
    return softmax_columns(P.T @ W_KQ @ P / np.sqrt(D))


def student_forward(params: StudentParams, X: np.ndarray) -> np.ndarray:
    """σ(W_V X S); X формы d×D или пакет N×d×D"""
    X = np.asarray(X, dtype=float)
    M, d = params.W_V.shape
    if X.ndim not in (2, 3) or X.shape[-2:] != (d, params.D):
        raise DimensionError(f"X: ожидалась форма (..., {d}, {params.D}), получено {X.shape}", key='X')
    S = attention_scores(params.W_KQ, params.encoding.P)
    return apply_activation(params.W_V @ X @ S, params.act)


def groups_to_mask(groups, D: int) -> np.ndarray:
    """Маска (i', i) из групп с индексами от 0 либо готовая булева маска"""
    if isinstance(groups, np.ndarray) and groups.dtype == bool:
        if groups.shape != (D, D):
            raise DimensionError(f"Маска групп должна быть {D}×{D}", key='groups')
        return groups
    if len(groups) != D:
        raise DimensionError(f"Ожидалось {D} групп, получено {len(groups)}", key='groups')
    mask = np.zeros((D, D), dtype=bool)
    for i, g in enumerate(groups):
        mask[list(g), i] = True
    return mask


def structured_wkq(C2: float, C3: float, groups: Sequence, P: np.ndarray) -> np.ndarray:
    """
    W_KQ = C2 Σ_i Σ_{i'∈G^i} p_{i'} p_iᵀ − C3 Σ_i Σ_{i'∉G^i} p_{i'} p_iᵀ
    """
    if C2 < 0 or C3 < 0:
        raise DomainError(f"C2, C3 должны быть >= 0, получено ({C2}, {C3})", key='C2' if C2 < 0 else 'C3')
    P = np.asarray(P, dtype=float)
    mask = groups_to_mask(groups, P.shape[0])
    coefficients = np.where(mask, float(C2), -float(C3))
    return P @ coefficients @ P.T


def p_from_c(C2: float, C3: float, D: int, K: int) -> float:
    """
    p = 1/(K + (D−K)·exp(−(C2+C3)/√D)); показатель ограничен, переполнения нет
    """
    if D <= K:
        raise DomainError(f"p определено только при D > K, получено D={D}, K={K}", key='K')
    if C2 < 0 or C3 < 0:
        raise DomainError(f"C2, C3 должны быть >= 0, получено ({C2}, {C3})", key='C2' if C2 < 0 else 'C3')
    exponent = min((C2 + C3) / np.sqrt(D), config.EXP_CLAMP)
    return float(1.0 / (K + (D - K) * np.exp(-exponent)))


def recovery_params(teacher: TeacherSpec, encoding: Optional[PositionalEncoding] = None,
                    scale: Optional[float] = None) -> StudentParams:
    """
    Параметры, точно воспроизводящие учителя: W_V = V*, W_KQ со столь большими
    C2 = C3, что вне группы softmax обращается в 0
    """
    if encoding is None:
        encoding = make_positional_encoding(teacher.D, 'identity')
    if scale is None:
        scale = 1000.0 * np.sqrt(teacher.D)
    W_KQ = structured_wkq(scale, scale, teacher.groups, encoding.P)
    return StudentParams(W_V=np.array(teacher.V_star, dtype=float), W_KQ=W_KQ, encoding=encoding,
                         act=teacher.act)


def full_transformer_forward(Z: np.ndarray, Wt_V: np.ndarray, Wt_KQ: np.ndarray,
                             act: ActivationKind = IDENTITY) -> np.ndarray:
    """
    Полный трансформер: σ(W̃_V Z softmax(Zᵀ W̃_KQ Z / √D)), Z = [X; P]
    """
    Z = np.asarray(Z, dtype=float)
    Wt_V = np.asarray(Wt_V, dtype=float)
    Wt_KQ = np.asarray(Wt_KQ, dtype=float)
    if Z.ndim not in (2, 3):
        raise DimensionError(f"Z: ожидалась матрица или пакет, получено {Z.shape}", key='Z')
    rows, D = Z.shape[-2:]
    if Wt_V.ndim != 2 or Wt_V.shape[1] != rows:
        raise DimensionError(f"W̃_V: ожидалось {rows} столбцов, получено {Wt_V.shape}", key='Wt_V')
    if Wt_KQ.shape != (rows, rows):
        raise DimensionError(f"W̃_KQ: ожидалась форма {(rows, rows)}, получено {Wt_KQ.shape}", key='Wt_KQ')
    Zt = np.swapaxes(Z, -1, -2)
    S = softmax_columns(Zt @ Wt_KQ @ Z / np.sqrt(D))
    return apply_activation(Wt_V @ Z @ S, act)


def stack_inputs(X: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Z = [X; P] для одной матрицы или пакета"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return np.vstack([X, P])
    return np.concatenate([X, np.broadcast_to(P, (X.shape[0],) + P.shape)], axis=1)

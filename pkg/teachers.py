"""
Модели-учителя f*(X) = σ(V* X S*) и модель меток с шумом

Позиции нумеруются с 1 во всех публичных конструкторах (g, i_star, partition),
внутри группы хранятся с 0.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

import config
from utils import (ActivationKind, ConfigError, DimensionError, TeacherIndexError, ValidationError,
                   apply_activation, format_float, make_rng)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NOISE_DISTRIBUTIONS = ('gaussian', 'none')
TEACHER_FAMILIES = tuple(config.TEACHER_FAMILIES)
DEFAULT_M = 5


@dataclass(frozen=True, eq=False)
class TeacherSpec:
    """Учитель: V* (M×d), S* (D×D), активация, K и группы G^i"""
    V_star: np.ndarray = field(repr=False)
    S_star: np.ndarray = field(repr=False)
    act: ActivationKind
    K: int
    groups: Tuple[Tuple[int, ...], ...] = field(repr=False)
    family: str = 'custom'

    @property
    def M(self) -> int:
        return self.V_star.shape[0]

    @property
    def d(self) -> int:
        return self.V_star.shape[1]

    @property
    def D(self) -> int:
        return self.S_star.shape[0]

    def group_mask(self) -> np.ndarray:
        """Булева маска (i', i): i' принадлежит G^i"""
        mask = np.zeros((self.D, self.D), dtype=bool)
        for i, g in enumerate(self.groups):
            mask[list(g), i] = True
        return mask


@dataclass(frozen=True, eq=False)
class LabelModel:
    """Метки Y = f*(X) + noise_scale·E, E с нулевым средним"""
    teacher: TeacherSpec
    noise_scale: float = 1.0
    noise_dist: str = 'gaussian'

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValidationError(f"noise_scale должно быть >= 0, получено {self.noise_scale}", key='noise')
        if self.noise_dist not in NOISE_DISTRIBUTIONS:
            raise ValidationError(f"Неизвестное распределение шума: '{self.noise_dist}'", key='noise_dist')


# ---------------------------------------------------------------------------
# Проверка и общий конструктор
# ---------------------------------------------------------------------------

def validate_teacher(spec: TeacherSpec) -> None:
    """
    Проверка инвариантов S*: значения только 0 и 1/K, ровно K ненулевых
    в каждом столбце, сумма столбца 1, группы согласованы с S*
    """
    S = spec.S_star
    D = spec.D
    if S.shape != (D, D):
        raise DimensionError(f"S* должна быть квадратной, получено {S.shape}", key='S_star')
    if spec.V_star.ndim != 2:
        raise DimensionError(f"V* должна быть матрицей, получено {spec.V_star.shape}", key='V_star')
    if not np.all(np.isfinite(spec.V_star)):
        raise ValidationError("V* содержит нечисловые значения", key='V_star')
    weight = 1.0 / spec.K
    nonzero = S != 0.0
    if not np.all(S[nonzero] == weight):
        raise ValidationError(f"S* допускает только значения 0 и 1/K = {weight}", key='S_star')
    counts = nonzero.sum(axis=0)
    bad = np.flatnonzero(counts != spec.K)
    if bad.size:
        raise ValidationError(f"Столбец {bad[0] + 1} содержит {counts[bad[0]]} ненулевых вместо K={spec.K}",
                              key='S_star')
    if np.max(np.abs(S.sum(axis=0) - 1.0)) > 1e-12:
        raise ValidationError("Столбцы S* должны суммироваться в 1", key='S_star')
    if len(spec.groups) != D or not np.array_equal(spec.group_mask(), nonzero):
        raise ValidationError("Группы G^i не согласованы с S*", key='groups')


def teacher_from_scores(V_star: np.ndarray, S_star: np.ndarray, act: ActivationKind,
                        family: str = 'custom') -> TeacherSpec:
    """Учитель по готовым V* и S*; K и группы восстанавливаются из S*"""
    V = np.array(V_star, dtype=float)
    S = np.array(S_star, dtype=float)
    if V.ndim == 1:
        V = V[None, :]
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"S* должна быть квадратной, получено {S.shape}", key='S_star')
    counts = (S != 0.0).sum(axis=0)
    K = int(counts[0]) if counts.size else 0
    if K < 1:
        raise ValidationError("Первый столбец S* пуст", key='S_star')
    groups = tuple(tuple(int(r) for r in np.flatnonzero(S[:, i])) for i in range(S.shape[1]))
    V.setflags(write=False)
    S.setflags(write=False)
    spec = TeacherSpec(V_star=V, S_star=S, act=act, K=K, groups=groups, family=family)
    validate_teacher(spec)
    return spec


def _scores_from_groups(D: int, K: int, groups: Sequence[Iterable[int]]) -> np.ndarray:
    S = np.zeros((D, D))
    for i, g in enumerate(groups):
        S[list(g), i] = 1.0 / K
    return S


def _check_v_star(V_star: np.ndarray, d: int) -> np.ndarray:
    V = np.array(V_star, dtype=float)
    if V.ndim == 1:
        V = V[None, :]
    if V.ndim != 2 or V.shape[1] != d:
        raise DimensionError(f"V* должна иметь d={d} столбцов, получено {V.shape}", key='V_star')
    return V


def _check_position(pos: int, D: int, key: str) -> int:
    if not (1 <= int(pos) <= D):
        raise TeacherIndexError(f"{key}: позиция {pos} вне диапазона [1, {D}]", key=key)
    return int(pos) - 1


# ---------------------------------------------------------------------------
# Четыре семейства
# ---------------------------------------------------------------------------

def contiguous_partition(D: int, K: int) -> List[List[int]]:
    """Разбиение [1..D] на подряд идущие блоки размера K"""
    if D % K != 0:
        raise ValidationError(f"D={D} не делится на K={K}", key='K')
    return [list(range(start + 1, start + K + 1)) for start in range(0, D, K)]


def cnn_pooling_teacher(d: int, D: int, K: int, partition: Sequence[Sequence[int]],
                        V_star: np.ndarray, act: ActivationKind) -> TeacherSpec:
    """
    CNN со средним пулингом: столбец i S* равен индикатору блока, содержащего i, деленному на K
    """
    V = _check_v_star(V_star, d)
    owner = [-1] * D
    for j, block in enumerate(partition):
        if len(block) != K:
            raise ValidationError(f"Блок {j + 1} имеет размер {len(block)} вместо K={K}", key='partition')
        for pos in block:
            idx = _check_position(pos, D, 'partition')
            if owner[idx] != -1:
                raise ValidationError(f"Позиция {pos} входит в несколько блоков", key='partition')
            owner[idx] = j
    missing = [i + 1 for i, o in enumerate(owner) if o == -1]
    if missing:
        raise ValidationError(f"Позиции не покрыты разбиением: {missing}", key='partition')
    blocks = [sorted(_check_position(p, D, 'partition') for p in block) for block in partition]
    groups = [blocks[owner[i]] for i in range(D)]
    return teacher_from_scores(V, _scores_from_groups(D, K, groups), act, family='cnn')


def cycle_adjacency(D: int) -> np.ndarray:
    """Матрица смежности цикла на D вершинах (2-регулярный граф)"""
    A = np.zeros((D, D))
    for i in range(D):
        A[i, (i + 1) % D] = 1.0
        A[(i + 1) % D, i] = 1.0
    return A


def gcn_regular_teacher(d: int, D: int, adjacency: np.ndarray, V_star: np.ndarray,
                        act: ActivationKind) -> TeacherSpec:
    """
    GCN на (K-1)-регулярном графе: S* = (A + I)/K
    """
    V = _check_v_star(V_star, d)
    A = np.asarray(adjacency, dtype=float)
    if A.shape != (D, D):
        raise DimensionError(f"Матрица смежности должна быть {D}×{D}, получено {A.shape}", key='adjacency')
    if not np.all((A == 0.0) | (A == 1.0)):
        raise ValidationError("Матрица смежности должна состоять из 0 и 1", key='adjacency')
    if not np.array_equal(A, A.T):
        raise ValidationError("Матрица смежности должна быть симметричной", key='adjacency')
    if np.any(np.diag(A) != 0.0):
        node = int(np.flatnonzero(np.diag(A))[0]) + 1
        raise ValidationError(f"Вершина {node} имеет петлю", key='adjacency')
    degrees = A.sum(axis=0).astype(int)
    for node, deg in enumerate(degrees):
        if deg != degrees[0]:
            raise ValidationError(f"Граф не регулярный: вершина {node + 1} имеет степень {deg}, "
                                  f"ожидалась {degrees[0]}", key='adjacency')
    K = int(degrees[0]) + 1
    S = (A + np.eye(D)) / K
    return teacher_from_scores(V, S, act, family='gcn')


def sts_teacher(d: int, D: int, g: Sequence[int], act: ActivationKind) -> TeacherSpec:
    """
    Выбор разреженных токенов: V* = I_d, каждый столбец S* усредняет токены из g
    """
    g = list(g)
    idx = sorted({_check_position(pos, D, 'g') for pos in g})
    if len(idx) != len(g) or not idx:
        raise ValidationError("g должно быть непустым множеством без повторов", key='g')
    K = len(idx)
    return teacher_from_scores(np.eye(d), _scores_from_groups(D, K, [idx] * D), act, family='sts')


def gslp_teacher(d: int, D: int, i_star: int, v_star: np.ndarray, act: ActivationKind) -> TeacherSpec:
    """
    Групповой разреженный линейный предиктор: M = 1, K = 1, выход <v*, x_{i*}> во всех столбцах
    """
    V = _check_v_star(np.asarray(v_star, dtype=float).reshape(1, -1), d)
    idx = _check_position(i_star, D, 'i_star')
    return teacher_from_scores(V, _scores_from_groups(D, 1, [[idx]] * D), act, family='gslp')


def sample_positions(D: int, K: int, seed: int) -> List[int]:
    """Случайные K различных позиций из 1..D (нумерация с 1), по возрастанию"""
    if not 1 <= K <= D:
        raise ConfigError(f"K должно быть в 1..{D}, получено {K}", key='K')
    rng = make_rng(seed, 'teacher', 1)
    return sorted(int(pos) + 1 for pos in rng.choice(D, size=K, replace=False))


def sample_unit_rows(M: int, d: int, seed: int) -> np.ndarray:
    """Случайная V* с единичными строками"""
    rng = make_rng(seed, 'teacher')
    V = rng.standard_normal((M, d))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Прямой проход и метки
# ---------------------------------------------------------------------------

def teacher_forward(spec: TeacherSpec, X: np.ndarray) -> np.ndarray:
    """f*(X) = σ(V* X S*); X формы d×D или пакет N×d×D"""
    X = np.asarray(X, dtype=float)
    if X.shape[-2:] != (spec.d, spec.D) or X.ndim not in (2, 3):
        raise DimensionError(f"X: ожидалась форма (..., {spec.d}, {spec.D}), получено {X.shape}", key='X')
    return apply_activation(spec.V_star @ X @ spec.S_star, spec.act)


def sample_labels(model: LabelModel, X: np.ndarray, seed: int, stream: int = 0,
                  purpose: str = 'noise') -> np.ndarray:
    """Y = f*(X) + шум; детерминировано по (seed, purpose, stream)"""
    Y = teacher_forward(model.teacher, X)
    if model.noise_dist == 'none' or model.noise_scale == 0.0:
        return Y
    rng = make_rng(seed, purpose, stream)
    return Y + model.noise_scale * rng.standard_normal(Y.shape)


def teacher_to_text(spec: TeacherSpec) -> str:
    """
    Текстовый формат: заголовок 'M d D K act kappa', затем строки V*, затем строки S*
    """
    kappa = spec.act.kappa if spec.act.kappa is not None else 0.0
    lines = [f"{spec.M} {spec.d} {spec.D} {spec.K} {spec.act.short_name} {format_float(kappa)}"]
    for row in spec.V_star:
        lines.append(' '.join(format_float(v) for v in row))
    for row in spec.S_star:
        lines.append(' '.join(format_float(v) for v in row))
    return '\n'.join(lines) + '\n'


def build_teacher(family: str, d: int, D: int, act: ActivationKind, seed: int, K: Optional[int] = None,
                  M: Optional[int] = None, g: Optional[Sequence[int]] = None, i_star: int = 1) -> TeacherSpec:
    """
    Учитель одного из четырех семейств с настройками по умолчанию:
    cnn - подряд идущие блоки, gcn - цикл, sts - K случайных позиций g, gslp - позиция i_star.
    V* для cnn, gcn и gslp берется со случайными единичными строками
    """
    if family not in TEACHER_FAMILIES:
        raise ConfigError(f"Неизвестное семейство учителя: '{family}'", key='teacher')
    if d < 1:
        raise DimensionError(f"d должно быть >= 1, получено {d}", key='d')
    if D < 2:
        raise DimensionError(f"D должно быть >= 2, получено {D}", key='D')
    if K is not None and K < 1:
        raise ConfigError(f"K должно быть >= 1, получено {K}", key='K')
    rows = M if M is not None else DEFAULT_M
    if family == 'cnn':
        if K is None:
            raise ConfigError("K: required", key='K')
        return cnn_pooling_teacher(d, D, K, contiguous_partition(D, K), sample_unit_rows(rows, d, seed), act)
    if family == 'gcn':
        adjacency = cycle_adjacency(D)
        expected = int(adjacency[:, 0].sum()) + 1
        if K is not None and K != expected:
            raise ConfigError(f"Для цикла на {D} вершинах K = {expected}, получено {K}", key='K')
        return gcn_regular_teacher(d, D, adjacency, sample_unit_rows(rows, d, seed), act)
    if family == 'sts':
        if g is None:
            if K is None:
                raise ConfigError("K: required", key='K')
            g = sample_positions(D, K, seed)
        elif K is not None and len(g) != K:
            raise ConfigError(f"g содержит {len(g)} позиций, а K={K}", key='g')
        return sts_teacher(d, D, g, act)
    if K is not None and K != 1:
        raise ConfigError(f"Для gslp K = 1, получено {K}", key='K')
    return gslp_teacher(d, D, i_star, sample_unit_rows(1, d, seed)[0], act)

"""
Эмпирическое обучение мини-пакетным градиентным спуском, OOD-оценка и метки худшего случая
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

import config
from attention import (StudentParams, attention_scores, softmax_columns, stack_inputs,
                       full_transformer_forward, student_forward)
from reports import cosine_similarity, two_value_structure
from teachers import LabelModel, TeacherSpec, sample_labels, teacher_forward
from utils import (ActivationKind, ConfigError, DimensionError, DomainError, NumericError, activation_derivative,
                   apply_activation, check_finite, make_positional_encoding, make_rng)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

EULER_GAMMA = float(np.euler_gamma)


@dataclass
class TrainConfig:
    """Параметры эмпирического обучения"""
    eta: float = config.DEFAULT_ETA
    T: int = config.DEFAULT_STEPS
    N: int = config.DEFAULT_BATCH
    seed: int = config.DEFAULT_SEED
    noise_scale: float = config.DEFAULT_NOISE_SCALE
    input_dist: str = 'gaussian'
    df: float = config.DEFAULT_STUDENT_T_DF
    record_every: int = config.DEFAULT_RECORD_EVERY
    ood_dist: str = config.DEFAULT_OOD_DIST
    ood_N: int = config.DEFAULT_OOD_BATCH
    encoding: str = 'identity'
    # каждый пример дополняется всеми циклическими сдвигами столбцов
    column_orbit: bool = False

    def __post_init__(self):
        if not self.eta >= 0:
            raise ConfigError(f"eta должно быть >= 0, получено {self.eta}", key='eta')
        if self.T < 0:
            raise ConfigError(f"steps должно быть >= 0, получено {self.T}", key='steps')
        if self.N < 1:
            raise ConfigError(f"batch должно быть >= 1, получено {self.N}", key='batch')
        if self.noise_scale < 0:
            raise ConfigError(f"noise должно быть >= 0, получено {self.noise_scale}", key='noise')
        if self.record_every < 1:
            raise ConfigError(f"record_every должно быть >= 1, получено {self.record_every}", key='record_every')
        if self.ood_N < 1:
            raise ConfigError(f"ood_batch должно быть >= 1, получено {self.ood_N}", key='ood_batch')
        for key, dist in (('input_dist', self.input_dist), ('ood_dist', self.ood_dist)):
            if dist not in config.INPUT_DISTRIBUTIONS:
                raise ConfigError(f"Неизвестное распределение: '{dist}'", key=key)
        if not self.df > 2:
            raise ConfigError(f"df должно быть > 2 (конечная дисперсия), получено {self.df}", key='df')


@dataclass
class TrajectoryRecord:
    """Снимок метрик на шаге t"""
    t: int
    excess_train_loss: float
    excess_ood_loss: float
    cosine_sim: float
    p_hat: float
    s_frob_gap: float
    wv_offpattern_ratio: float
    c1_hat: float = 0.0
    kq_offpattern_ratio: float = 0.0
    s_max_dev: float = 0.0
    kq_grad_norm: float = 0.0
    batch_loss: float = 0.0

    def as_row(self) -> Dict:
        return asdict(self)


class Scalars(NamedTuple):
    C1_hat: float
    p_hat: float
    offpattern_V: float
    offpattern_KQ: float


# ---------------------------------------------------------------------------
# Данные
# ---------------------------------------------------------------------------

def _draw(rng: np.random.Generator, dist: str, shape: Tuple[int, ...], df: float) -> np.ndarray:
    if dist == 'gaussian':
        return rng.standard_normal(shape)
    if dist == 'exponential_centered':
        return rng.exponential(1.0, shape) - 1.0
    if dist == 'student_t':
        return rng.standard_t(df, shape)
    if dist == 'gumbel_centered':
        return rng.gumbel(0.0, 1.0, shape) - EULER_GAMMA
    raise ConfigError(f"Неизвестное распределение: '{dist}'", key='input_dist')


def sample_inputs(d: int, D: int, N: int, dist: str, seed: int, step: int = 0,
                  purpose: str = 'inputs', df: float = config.DEFAULT_STUDENT_T_DF) -> np.ndarray:
    """
    Пакет N входов d×D с i.i.d. координатами; нецентрированные распределения сдвинуты к нулю.
    Детерминировано по (seed, purpose, step)
    """
    if d < 1 or D < 1 or N < 1:
        raise DimensionError(f"Размеры должны быть положительны: d={d}, D={D}, N={N}", key='d')
    rng = make_rng(seed, purpose, step)
    return _draw(rng, dist, (N, d, D), df)


def column_orbit(X: np.ndarray) -> np.ndarray:
    """Каждый пример со всеми D циклическими сдвигами столбцов"""
    D = X.shape[-1]
    return np.concatenate([np.roll(X, shift, axis=-1) for shift in range(D)], axis=0)


def _training_batch(cfg: TrainConfig, teacher: TeacherSpec, step: int) -> Tuple[np.ndarray, np.ndarray]:
    model = LabelModel(teacher, cfg.noise_scale, 'gaussian')
    if cfg.column_orbit:
        base = -(-cfg.N // teacher.D)
        X = column_orbit(sample_inputs(teacher.d, teacher.D, base, cfg.input_dist, cfg.seed, step, df=cfg.df))
    else:
        X = sample_inputs(teacher.d, teacher.D, cfg.N, cfg.input_dist, cfg.seed, step, df=cfg.df)
    return X, sample_labels(model, X, cfg.seed, stream=step)


# ---------------------------------------------------------------------------
# Потеря и градиенты
# ---------------------------------------------------------------------------

def _batch(X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 2:
        X, Y = X[None], Y[None]
    if X.shape[0] != Y.shape[0] or X.shape[-1] != Y.shape[-1]:
        raise DimensionError(f"Пакеты X {X.shape} и Y {Y.shape} не согласованы", key='Y')
    return X, Y


def batch_loss(params: StudentParams, teacher: TeacherSpec, X_batch: np.ndarray, Y_batch: np.ndarray) -> float:
    """(1/2N)·Σ‖Y_n − TF(X_n)‖²_F"""
    params.check_compatible(teacher)
    X, Y = _batch(X_batch, Y_batch)
    residual = Y - student_forward(params, X)
    return float(0.5 * np.sum(residual ** 2) / X.shape[0])


def _scores_backward(S: np.ndarray, dS: np.ndarray) -> np.ndarray:
    """Градиент по логитам столбцового softmax"""
    return S * (dS - np.sum(S * dS, axis=-2, keepdims=True))


def batch_gradients(params: StudentParams, teacher_act: ActivationKind, X_batch: np.ndarray,
                    Y_batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Градиенты пакетной потери по W_V и W_KQ:
      G = (σ(H) − Y)⊙σ'(H)/N, H = W_V X S
      ∇W_V = Σ G Sᵀ Xᵀ;  ∇S = Σ (W_V X)ᵀ G;  ∇W_KQ = P·softmax'(∇S)·Pᵀ/√D
    """
    X, Y = _batch(X_batch, Y_batch)
    P = params.encoding.P
    D = params.D
    S = attention_scores(params.W_KQ, P)
    A = np.einsum('md,ndi->nmi', params.W_V, X)
    H = A @ S
    G = (apply_activation(H, teacher_act) - Y) * activation_derivative(H, teacher_act) / X.shape[0]
    grad_v = np.einsum('nmi,ji,nkj->mk', G, S, X)
    grad_s = np.einsum('nmj,nmi->ji', A, G)
    grad_kq = P @ _scores_backward(S, grad_s) @ P.T / math.sqrt(D)
    return grad_v, grad_kq


# ---------------------------------------------------------------------------
# Извлечение скаляров и OOD
# ---------------------------------------------------------------------------

def extract_scalars(params: StudentParams, teacher: TeacherSpec) -> Scalars:
    """
    C1_hat = ⟨W_V, V*⟩/‖V*‖²; p_hat - средний вес внутри групп;
    доли вне шаблона - норма остатка к полной норме
    """
    params.check_compatible(teacher)
    V = teacher.V_star
    v_sq = float(np.sum(V * V))
    if v_sq == 0.0:
        raise DomainError("‖V*‖ = 0, проекция не определена", key='V_star')
    c1_hat = float(np.sum(params.W_V * V)) / v_sq
    w_norm = float(np.linalg.norm(params.W_V))
    offpattern_v = float(np.linalg.norm(params.W_V - c1_hat * V)) / w_norm if w_norm > 0 else 0.0

    mask = teacher.group_mask()
    S = attention_scores(params.W_KQ, params.encoding.P)
    p_hat = float(S[mask].mean())

    coefficients = params.encoding.P.T @ params.W_KQ @ params.encoding.P
    kq_norm = float(np.linalg.norm(coefficients))
    if kq_norm > 0:
        fitted = np.where(mask, coefficients[mask].mean(), coefficients[~mask].mean() if (~mask).any() else 0.0)
        offpattern_kq = float(np.linalg.norm(coefficients - fitted)) / kq_norm
    else:
        offpattern_kq = 0.0
    return Scalars(C1_hat=c1_hat, p_hat=p_hat, offpattern_V=offpattern_v, offpattern_KQ=offpattern_kq)


def excess_gap_values(params: StudentParams, teacher: TeacherSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Поэлементные ½‖Y − TF‖² − ½‖Y − f*‖² по пакету"""
    residual_student = Y - student_forward(params, X)
    residual_teacher = Y - teacher_forward(teacher, X)
    return 0.5 * (np.sum(residual_student ** 2, axis=(-2, -1)) - np.sum(residual_teacher ** 2, axis=(-2, -1)))


def ood_batch(teacher: TeacherSpec, dist: str, N: int, seed: int, noise_scale: float = 1.0,
              df: float = config.DEFAULT_STUDENT_T_DF, stream: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """OOD-пакет (X̃, Ỹ) с зашумленными метками; свой поток на каждый stream"""
    X = sample_inputs(teacher.d, teacher.D, N, dist, seed, stream, purpose='ood', df=df)
    Y = sample_labels(LabelModel(teacher, noise_scale, 'gaussian'), X, seed, stream=stream, purpose='ood_noise')
    return X, Y


def ood_excess_loss(params: StudentParams, teacher: TeacherSpec, dist: str, N: int, seed: int,
                    noise_scale: float = 1.0, df: float = config.DEFAULT_STUDENT_T_DF, stream: int = 0) -> float:
    """
    (1/2N)Σ‖Ỹ_n − TF(X̃_n)‖² − (1/2N)Σ‖Ỹ_n − f*(X̃_n)‖², Ỹ из модели меток на X̃.
    Перекрестный член шума ⟨ε, f* − TF⟩ входит в оценку
    """
    params.check_compatible(teacher)
    X, Y = ood_batch(teacher, dist, N, seed, noise_scale, df, stream)
    return float(excess_gap_values(params, teacher, X, Y).mean())


def worst_case_labels(teacher: TeacherSpec, params: StudentParams, X_tilde: np.ndarray,
                      c_prime: float = config.WORST_CASE_C_PRIME,
                      floor: float = config.WORST_CASE_FLOOR) -> np.ndarray:
    """
    Ỹ = f*(X̃) − sign(C1_hat)·sign(Σ_{i1∉G^i}⟨v*_m, x̃_i1⟩)·1{A_m,i},
    A_m,i: |сумма вне группы| >= max((2/c')·|сумма в группе|, floor)
    """
    if not c_prime > 0:
        raise DomainError(f"c' должно быть > 0, получено {c_prime}", key='c_prime')
    X = np.asarray(X_tilde, dtype=float)
    projections = np.einsum('md,...di->...mi', teacher.V_star, X)
    mask = teacher.group_mask().astype(float)
    on_group = projections @ mask
    off_group = projections @ (1.0 - mask)
    event = np.abs(off_group) >= np.maximum(2.0 / c_prime * np.abs(on_group), floor)
    orientation = 1.0 if extract_scalars(params, teacher).C1_hat >= 0 else -1.0
    return teacher_forward(teacher, X) - orientation * np.sign(off_group) * event


class GapEstimate(NamedTuple):
    gap: float
    se: float
    z: float


def worst_case_gap(teacher: TeacherSpec, params: StudentParams, N: int, seed: int, dist: str = 'gaussian',
                   c_prime: float = config.WORST_CASE_C_PRIME, floor: float = config.WORST_CASE_FLOOR,
                   chunk: int = 10_000, df: float = config.DEFAULT_STUDENT_T_DF) -> GapEstimate:
    """Средний избыточный разрыв на метках худшего случая, его стандартная ошибка и z"""
    values = []
    for index, start in enumerate(range(0, N, chunk)):
        size = min(chunk, N - start)
        X = sample_inputs(teacher.d, teacher.D, size, dist, seed, index, purpose='ood', df=df)
        Y = worst_case_labels(teacher, params, X, c_prime, floor)
        values.append(excess_gap_values(params, teacher, X, Y))
    gaps = np.concatenate(values)
    mean = float(gaps.mean())
    se = float(gaps.std(ddof=1) / math.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    z = mean / se if se > 0 else 0.0
    return GapEstimate(gap=mean, se=se, z=z)


# ---------------------------------------------------------------------------
# Цикл обучения
# ---------------------------------------------------------------------------

def _snapshot(t: int, params: StudentParams, teacher: TeacherSpec, X: np.ndarray, cfg: TrainConfig,
              grad_kq: np.ndarray, loss: float) -> TrajectoryRecord:
    diff = teacher_forward(teacher, X) - student_forward(params, X)
    S = attention_scores(params.W_KQ, params.encoding.P)
    p_hat, _, max_dev = two_value_structure(S, teacher.groups)
    scalars = extract_scalars(params, teacher)
    cos = cosine_similarity(params.W_V, teacher.V_star) if np.any(params.W_V) else 0.0
    return TrajectoryRecord(
        t=t,
        excess_train_loss=float(0.5 * np.sum(diff ** 2) / X.shape[0]),
        excess_ood_loss=ood_excess_loss(params, teacher, cfg.ood_dist, cfg.ood_N, cfg.seed, cfg.noise_scale,
                                        cfg.df, stream=t),
        cosine_sim=cos,
        p_hat=p_hat,
        s_frob_gap=float(np.linalg.norm(S - teacher.S_star)),
        wv_offpattern_ratio=scalars.offpattern_V,
        c1_hat=scalars.C1_hat,
        kq_offpattern_ratio=scalars.offpattern_KQ,
        s_max_dev=max_dev,
        kq_grad_norm=float(np.linalg.norm(grad_kq)),
        batch_loss=loss,
    )


def train(cfg: TrainConfig, teacher: TeacherSpec,
          initial: Optional[StudentParams] = None) -> Tuple[StudentParams, List[TrajectoryRecord]]:
    """
    T шагов одновременного градиентного спуска по W_V и W_KQ, новый пакет на каждом шаге.
    Метрики пишутся на t = 0, каждые record_every шагов и на t = T; OOD-потеря считается
    на свежем зашумленном пакете ood_N на каждом записанном шаге
    """
    if initial is None:
        encoding = make_positional_encoding(teacher.D, cfg.encoding, cfg.seed)
        params = StudentParams.zeros(teacher.M, teacher.d, encoding, teacher.act)
    else:
        params = initial.copy()
    params.check_compatible(teacher)

    records: List[TrajectoryRecord] = []
    initial_loss = None
    log_every = max(cfg.T // 10, 1)
    for t in range(cfg.T + 1):
        X, Y = _training_batch(cfg, teacher, t)
        loss = batch_loss(params, teacher, X, Y)
        if not math.isfinite(loss):
            logger.error(f"Нечисловая потеря на шаге {t}")
            raise NumericError(f"Нечисловая потеря на шаге {t}")
        if initial_loss is None:
            initial_loss = loss
        elif loss > config.DIVERGENCE_FACTOR * max(initial_loss, config.LOSS_FLOOR):
            logger.error(f"Расходимость на шаге {t}: потеря {loss:.6g}, начальная {initial_loss:.6g}")
            raise NumericError(f"Обучение разошлось на шаге {t}: потеря {loss:.6g} при начальной "
                               f"{initial_loss:.6g}; уменьшите eta (сейчас {cfg.eta})")
        grad_v, grad_kq = batch_gradients(params, teacher.act, X, Y)
        check_finite(grad_kq, f"градиенте W_KQ на шаге {t}")
        if t % cfg.record_every == 0 or t == cfg.T:
            records.append(_snapshot(t, params, teacher, X, cfg, grad_kq, loss))
        if t % log_every == 0:
            logger.info(f"Обучение t={t}: потеря {loss:.6g}")
        if t < cfg.T:
            params.W_V = params.W_V - cfg.eta * grad_v
            params.W_KQ = params.W_KQ - cfg.eta * grad_kq
    return params, records


# ---------------------------------------------------------------------------
# Полный трансформер (экспериментальная демонстрация)
# ---------------------------------------------------------------------------

@dataclass
class FullTransformerParams:
    """W̃_V (M×(d+D)) и W̃_KQ ((d+D)×(d+D)) над Z = [X; P]"""
    Wt_V: np.ndarray = field(repr=False)
    Wt_KQ: np.ndarray = field(repr=False)


def full_batch_gradients(params: FullTransformerParams, act: ActivationKind, Z: np.ndarray,
                         Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Градиенты пакетной потери полного трансформера и сама потеря"""
    D = Z.shape[-1]
    N = Z.shape[0]
    Zt = np.swapaxes(Z, -1, -2)
    S = softmax_columns(Zt @ params.Wt_KQ @ Z / math.sqrt(D))
    A = np.einsum('mr,nri->nmi', params.Wt_V, Z)
    H = A @ S
    residual = apply_activation(H, act) - Y
    loss = float(0.5 * np.sum(residual ** 2) / N)
    G = residual * activation_derivative(H, act) / N
    grad_v = np.einsum('nmi,nji,nrj->mr', G, S, Z)
    grad_s = np.einsum('nmj,nmi->nji', A, G)
    grad_kq = np.einsum('nrj,nji,nsi->rs', Z, _scores_backward(S, grad_s), Z) / math.sqrt(D)
    return grad_v, grad_kq, loss


def train_full_transformer(cfg: TrainConfig, teacher: TeacherSpec) -> Tuple[FullTransformerParams, List[float]]:
    """
    Обучение полного трансформера на Z = [X; P] теми же пакетами; только для тепловых карт блоков W̃_KQ
    """
    encoding = make_positional_encoding(teacher.D, cfg.encoding, cfg.seed)
    rows = teacher.d + teacher.D
    params = FullTransformerParams(Wt_V=np.zeros((teacher.M, rows)), Wt_KQ=np.zeros((rows, rows)))
    losses = []
    for t in range(cfg.T):
        X, Y = _training_batch(cfg, teacher, t)
        Z = stack_inputs(X, encoding.P)
        grad_v, grad_kq, loss = full_batch_gradients(params, teacher.act, Z, Y)
        if not math.isfinite(loss) or (losses and loss > config.DIVERGENCE_FACTOR * max(losses[0], config.LOSS_FLOOR)):
            raise NumericError(f"Полный трансформер разошелся на шаге {t}")
        losses.append(loss)
        params.Wt_V = params.Wt_V - cfg.eta * grad_v
        params.Wt_KQ = params.Wt_KQ - cfg.eta * grad_kq
        if t % max(cfg.T // 10, 1) == 0:
            logger.info(f"Полный трансформер t={t}: потеря {loss:.6g}")
    return params, losses


def full_transformer_loss(params: FullTransformerParams, act: ActivationKind, Z: np.ndarray, Y: np.ndarray) -> float:
    """(1/2N)Σ‖Y_n − σ(W̃_V Z_n S_n)‖² для проверки градиентов"""
    residual = Y - full_transformer_forward(Z, params.Wt_V, params.Wt_KQ, act)
    return float(0.5 * np.sum(residual ** 2) / Z.shape[0])

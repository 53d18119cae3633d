"""
Редуцированная скалярная динамика (C1, C2, C3) и производные теоретические величины:
C1*, A, B, избыточная потеря, расстояние ‖S − S*‖_F, ориентиры фаз, случай D = K
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import config
from attention import p_from_c
from expectations import F1, F2, F3, F4, F5, F6, check_p_range, plug_variances
from utils import ActivationKind, ConfigError, DomainError, NumericError, c_sigma

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


@dataclass(frozen=True)
class ScalarState:
    """Состояние на шаге t; p всегда вычисляется из (C2, C3)"""
    t: int
    C1: float
    C2: float
    C3: float
    p: float


@dataclass(frozen=True)
class DynamicsConfig:
    """Размеры, шаг обучения и активация; строки учителя единичные (v_norm_sq = M)"""
    D: int
    K: int
    M: int
    eta: float
    act: ActivationKind
    v_norm_sq: Optional[float] = None

    def __post_init__(self):
        if self.K < 1 or self.D < self.K:
            raise ConfigError(f"Требуется D >= K >= 1, получено D={self.D}, K={self.K}", key='K')
        if self.M < 1:
            raise ConfigError(f"M должно быть >= 1, получено {self.M}", key='M')
        if not self.eta > 0:
            raise ConfigError(f"eta должно быть > 0, получено {self.eta}", key='eta')
        if self.v_norm_sq is None:
            object.__setattr__(self, 'v_norm_sq', float(self.M))
        elif abs(self.v_norm_sq - self.M) > 1e-12 * self.M:
            raise ConfigError(f"Скалярная динамика требует единичных строк V*: v_norm_sq={self.v_norm_sq}, "
                              f"M={self.M}", key='v_norm_sq')


def initial_state(cfg: DynamicsConfig) -> ScalarState:
    """Нулевая инициализация: C1 = C2 = C3 = 0, p = 1/D"""
    return ScalarState(t=0, C1=0.0, C2=0.0, C3=0.0, p=p_from_c(0.0, 0.0, cfg.D, cfg.K))


def _require_gap(D: int, K: int) -> None:
    if D <= K:
        raise DomainError(f"Скалярная динамика требует D > K (D={D}, K={K}); для D = K используйте dynamics_dk",
                          key='K')


def step_scalar(state: ScalarState, cfg: DynamicsConfig) -> ScalarState:
    """
    Один шаг:
      C1 += ηD(F3/(Kp) − C1·F1)
      C2 += ηC1M/√D·((F4/p − F3)/K − C1(F2₁ − pF1))
      C3 += ηC1M(1−Kp)/(√D(D−K))·((F3/(Kp) − (D−K)F5/(Kp(1−Kp))) − C1(F1 − (D−K)F2₂/(1−Kp)))
    """
    D, K, M, eta, act = cfg.D, cfg.K, cfg.M, cfg.eta, cfg.act
    _require_gap(D, K)
    C1, p = state.C1, state.p
    va = plug_variances(p, D, K)
    f1 = F1(va.f1, act)
    f21 = F2(*va.f21, act)
    f22 = F2(*va.f22, act)
    f3 = F3(*va.f3, act)
    f4 = F4(*va.f4, act)
    f5 = F5(*va.f5, act)
    x = max(1.0 - K * p, 0.0)
    root_d = math.sqrt(D)

    c1_next = C1 + eta * D * (f3 / (K * p) - C1 * f1)
    delta_c2 = eta * C1 * M / root_d * ((f4 / p - f3) / K - C1 * (f21 - p * f1))
    # множитель (1−Kp) внесен в скобку, деления на 1−Kp нет
    delta_c3 = eta * C1 * M / (root_d * (D - K)) * (
        (x * f3 - (D - K) * f5) / (K * p) - C1 * (x * f1 - (D - K) * f22))

    c2_next = state.C2 + delta_c2
    c3_next = state.C3 + delta_c3
    if not all(math.isfinite(v) for v in (c1_next, c2_next, c3_next)):
        raise NumericError(f"Нечисловое состояние динамики на шаге {state.t + 1}")
    return ScalarState(t=state.t + 1, C1=c1_next, C2=c2_next, C3=c3_next,
                       p=p_from_c(max(c2_next, 0.0), max(c3_next, 0.0), D, K))


def c1_star(p: float, D: int, K: int, act: ActivationKind) -> float:
    """Подвижная цель C1* = F3/(Kp·F1)"""
    va = plug_variances(p, D, K)
    return F3(*va.f3, act) / (K * p * F1(va.f1, act))


def a_b(p: float, D: int, K: int, act: ActivationKind) -> Tuple[float, float]:
    """Разложение F3 = A + B при подставленных дисперсиях"""
    check_p_range(p, D, K)
    x = max(1.0 - K * p, 0.0)
    on = K * p * p
    if act.kind == 'identity':
        return on, 0.0
    angle = math.atan2(math.sqrt(K * (D - K)) * p, x)
    a_relu_tail = on / (2.0 * math.pi) * angle
    b_relu = math.sqrt(K / (D - K)) * p * x / (2.0 * math.pi)
    if act.kind == 'relu':
        return on / 4.0 + a_relu_tail, b_relu
    weight = (1.0 - act.kappa) ** 2
    return (1.0 + act.kappa) ** 2 * on / 4.0 + weight * a_relu_tail, weight * b_relu


def excess_loss_scalar(C1: float, p: float, D: int, K: int, v_frob_sq: float, act: ActivationKind) -> float:
    """
    L̃ = c_σD‖V*‖²/(2(D−K))·[K(D−K)(1/K − C1p)² + C1²(1−Kp)²] − D‖V*‖²·F6
    """
    check_p_range(p, D, K)
    x = max(1.0 - K * p, 0.0)
    quadratic = K * (D - K) * (1.0 / K - C1 * p) ** 2 + C1 * C1 * x * x
    value = c_sigma(act) * D * v_frob_sq / (2.0 * (D - K)) * quadratic - D * v_frob_sq * F6(C1, p, D, K, act)
    return max(value, 0.0)


def s_frobenius_gap(p: float, D: int, K: int) -> float:
    """‖S − S*‖_F = D/√(K(D−K))·(1 − Kp) для двухзначной S"""
    check_p_range(p, D, K)
    return D / math.sqrt(K * (D - K)) * max(1.0 - K * p, 0.0)


def run_dynamics(cfg: DynamicsConfig, T: int, record_every: int = 1) -> Tuple[List[ScalarState], List[float]]:
    """
    Траектория из нулевого состояния на T шагов; сохраняются t = 0, каждые record_every шагов и T.
    Возвращает (состояния, избыточная потеря в этих состояниях)
    """
    if T < 1:
        raise ConfigError(f"T должно быть >= 1, получено {T}", key='steps')
    if record_every < 1:
        raise ConfigError(f"record_every должно быть >= 1, получено {record_every}", key='record_every')
    _require_gap(cfg.D, cfg.K)
    state = initial_state(cfg)
    states = [state]
    excess = [excess_loss_scalar(state.C1, state.p, cfg.D, cfg.K, cfg.v_norm_sq, cfg.act)]
    log_every = max(T // 10, 1)
    for _ in range(T):
        state = step_scalar(state, cfg)
        if state.t % record_every == 0 or state.t == T:
            states.append(state)
            excess.append(excess_loss_scalar(state.C1, state.p, cfg.D, cfg.K, cfg.v_norm_sq, cfg.act))
        if state.t % log_every == 0:
            logger.info(f"Динамика t={state.t}: C1={state.C1:.6g}, p·K={state.p * cfg.K:.6g}")
    return states, excess


@dataclass(frozen=True)
class SandwichResult:
    lower_ok: bool
    upper_ok: bool
    lower: float
    upper: float
    c1_star: float
    lower_margin: float
    upper_margin: float


def sandwich_check(state: ScalarState, cfg: DynamicsConfig) -> SandwichResult:
    """
    Границы max(0.95, 1 − δ)·C1* <= C1 <= (1 + δ)·C1*,
    δ = 4A/(5(A+B))·(1−Kp)/(Kp(Dp−1)); при Dp <= 1 верхняя граница бесконечна
    """
    D, K, p = cfg.D, cfg.K, state.p
    target = c1_star(p, D, K, cfg.act)
    A, B = a_b(p, D, K, cfg.act)
    spread = D * p - 1.0
    if spread <= 0.0:
        delta = math.inf
    else:
        delta = 4.0 * A / (5.0 * (A + B)) * max(1.0 - K * p, 0.0) / (K * p * spread)
    upper = (1.0 + delta) * target
    lower = max(config.BURN_IN_FRACTION, 1.0 - delta) * target
    return SandwichResult(
        lower_ok=state.C1 >= lower,
        upper_ok=state.C1 <= upper,
        lower=lower,
        upper=upper,
        c1_star=target,
        lower_margin=state.C1 - lower,
        upper_margin=upper - state.C1,
    )


def landmarks(states: Sequence[ScalarState], cfg: DynamicsConfig, excess: Optional[Sequence[float]] = None,
              epsilon: Optional[float] = None, c1_fraction: float = config.BURN_IN_FRACTION,
              kp_threshold: float = config.KP_LANDMARK) -> Dict[str, Optional[int]]:
    """
    Измеренные ориентиры траектории:
      t1        - первый t с C1 >= 0.95·C1*
      T_star    - первый t с K·p >= 1/2
      T_star_p  - первый t с p >= 1/2 (буквальное прочтение)
      T_eps     - первый t с избыточной потерей <= epsilon
    """
    result: Dict[str, Optional[int]] = {'t1': None, 'T_star': None, 'T_star_p': None, 'T_eps': None}
    for idx, s in enumerate(states):
        if result['t1'] is None and s.C1 >= c1_fraction * c1_star(s.p, cfg.D, cfg.K, cfg.act):
            result['t1'] = s.t
        if result['T_star'] is None and cfg.K * s.p >= kp_threshold:
            result['T_star'] = s.t
        if result['T_star_p'] is None and s.p >= kp_threshold:
            result['T_star_p'] = s.t
        if epsilon is not None and excess is not None and result['T_eps'] is None and excess[idx] <= epsilon:
            result['T_eps'] = s.t
    return result


def theory_excess_rate(D: int, K: int, eta: float, t: int) -> float:
    """Порядок избыточной потери K·D⁴/(η·t) (без констант)"""
    return K * D ** 4 / (eta * t)


def one_minus_kp_asymptote(D: int, K: int, M: int, eta: float, t: int) -> float:
    """Асимптотика 1 − Kp ≈ √(K(D−K)²/(2ηMt)) для identity"""
    return math.sqrt(K * (D - K) ** 2 / (2.0 * eta * M * t))


def trajectory_rows(states: Sequence[ScalarState], excess: Sequence[float], cfg: DynamicsConfig) -> List[Dict]:
    """Строки CSV траектории: t, C1, C2, C3, p, C1_star, A, B, excess_loss, s_frob_gap"""
    rows = []
    for s, loss in zip(states, excess):
        A, B = a_b(s.p, cfg.D, cfg.K, cfg.act)
        rows.append({
            't': s.t, 'C1': s.C1, 'C2': s.C2, 'C3': s.C3, 'p': s.p,
            'C1_star': c1_star(s.p, cfg.D, cfg.K, cfg.act), 'A': A, 'B': B,
            'excess_loss': loss, 's_frob_gap': s_frobenius_gap(s.p, cfg.D, cfg.K),
        })
    return rows


# ---------------------------------------------------------------------------
# Случай D = K: равномерное внимание
# ---------------------------------------------------------------------------

class DKPoint(NamedTuple):
    t: int
    C: float
    excess_bound: float
    excess: float


def dynamics_dk(eta: float, act: ActivationKind, T: int, v_norm_sq: float = 1.0) -> List[DKPoint]:
    """
    D = K: W_KQ остается нулевым, W_V = C(t)·V*, 1 − C(t+1) = (1 − ηF1(1))(1 − C(t)), C(0) = 0.
    Граница избыточной потери (Σ‖v‖²/2)·e^{−η(t−1)}; точное значение c_σ(1−C)²Σ‖v‖²/2
    """
    if not 0 < eta <= 0.5:
        raise ConfigError(f"Для D = K требуется 0 < eta <= 1/2, получено {eta}", key='eta')
    if T < 0:
        raise ConfigError(f"T должно быть >= 0, получено {T}", key='steps')
    rate = eta * F1(1.0, act)
    scale = c_sigma(act) * v_norm_sq / 2.0
    points = []
    C = 0.0
    for t in range(T + 1):
        bound = v_norm_sq / 2.0 * math.exp(-eta * (t - 1))
        points.append(DKPoint(t=t, C=C, excess_bound=bound, excess=scale * (1.0 - C) ** 2))
        C = C + rate * (1.0 - C)
    return points


def dk_closed_form(eta: float, act: ActivationKind, t: int) -> float:
    """1 − C(t) = (1 − ηF1(1))^t"""
    return (1.0 - eta * F1(1.0, act)) ** t

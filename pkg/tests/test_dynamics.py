"""
Тесты скалярной динамики (C1, C2, C3)
"""
import math

import numpy as np
import pytest

from attention import StudentParams, attention_scores, p_from_c, structured_wkq
from dynamics import (DynamicsConfig, ScalarState, a_b, c1_star, dk_closed_form, dynamics_dk, excess_loss_scalar,
                      initial_state, landmarks, one_minus_kp_asymptote, run_dynamics, s_frobenius_gap,
                      sandwich_check, step_scalar, theory_excess_rate, trajectory_rows)
from expectations import F3, plug_variances
from reports import loglog_slope
from teachers import sts_teacher, teacher_forward
from trainer import excess_gap_values, sample_inputs
from utils import IDENTITY, RELU, ConfigError, DomainError, leaky, make_positional_encoding

ACTS = [IDENTITY, RELU, leaky(0.1)]


def _loss(C1, C2, C3, cfg):
    return excess_loss_scalar(C1, p_from_c(C2, C3, cfg.D, cfg.K), cfg.D, cfg.K, float(cfg.M), cfg.act)


def test_initial_state():
    cfg = DynamicsConfig(D=12, K=3, M=2, eta=0.1, act=RELU)
    state = initial_state(cfg)
    assert (state.t, state.C1, state.C2, state.C3) == (0, 0.0, 0.0, 0.0)
    assert state.p == pytest.approx(1.0 / 12.0)
    assert cfg.v_norm_sq == 2.0


def test_first_step_moves_only_c1():
    cfg = DynamicsConfig(D=12, K=3, M=2, eta=0.1, act=IDENTITY)
    state = step_scalar(initial_state(cfg), cfg)
    assert state.t == 1
    assert state.C1 > 0.0
    assert state.C2 == 0.0 and state.C3 == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        DynamicsConfig(D=10, K=2, M=3, eta=0.0, act=RELU)
    with pytest.raises(ConfigError):
        DynamicsConfig(D=10, K=2, M=3, eta=0.1, act=RELU, v_norm_sq=1.0)
    with pytest.raises(ConfigError):
        DynamicsConfig(D=3, K=4, M=3, eta=0.1, act=RELU)
    equal = DynamicsConfig(D=4, K=4, M=1, eta=0.1, act=RELU)
    with pytest.raises(DomainError):
        step_scalar(initial_state(DynamicsConfig(D=5, K=4, M=1, eta=0.1, act=RELU)), equal)
    with pytest.raises(DomainError):
        run_dynamics(equal, 10)
    with pytest.raises(ConfigError):
        run_dynamics(DynamicsConfig(D=5, K=1, M=1, eta=0.1, act=RELU), 0)


@pytest.mark.parametrize('act', ACTS, ids=str)
@pytest.mark.parametrize('C1,C2,C3', [(0.3, 1.0, 2.0), (0.8, 2.5, 1.5), (0.8, 3.0, 3.0)])
def test_step_is_scaled_gradient_of_excess_loss(act, C1, C2, C3):
    """ΔC1 = −η/M·∂L/∂C1, ΔC2 = −η/(DK)·∂L/∂C2, ΔC3 = −η/(D(D−K))·∂L/∂C3"""
    cfg = DynamicsConfig(D=10, K=2, M=3, eta=0.05, act=act)
    D, K, M, eta = cfg.D, cfg.K, cfg.M, cfg.eta
    state = ScalarState(t=0, C1=C1, C2=C2, C3=C3, p=p_from_c(C2, C3, D, K))
    nxt = step_scalar(state, cfg)
    h = 1e-5
    grad_c1 = (_loss(C1 + h, C2, C3, cfg) - _loss(C1 - h, C2, C3, cfg)) / (2 * h)
    grad_c2 = (_loss(C1, C2 + h, C3, cfg) - _loss(C1, C2 - h, C3, cfg)) / (2 * h)
    grad_c3 = (_loss(C1, C2, C3 + h, cfg) - _loss(C1, C2, C3 - h, cfg)) / (2 * h)
    assert nxt.C1 - C1 == pytest.approx(-eta / M * grad_c1, rel=1e-5, abs=1e-10)
    assert nxt.C2 - C2 == pytest.approx(-eta / (D * K) * grad_c2, rel=1e-5, abs=1e-10)
    assert nxt.C3 - C3 == pytest.approx(-eta / (D * (D - K)) * grad_c3, rel=1e-5, abs=1e-10)


@pytest.mark.parametrize('act', [IDENTITY, RELU], ids=str)
def test_p_monotone_and_sandwich_after_burn_in(act):
    cfg = DynamicsConfig(D=20, K=4, M=2, eta=0.05, act=act)
    states, _ = run_dynamics(cfg, 20_000, record_every=10)
    assert all(b.p >= a.p for a, b in zip(states, states[1:]))
    assert states[-1].p > states[0].p
    marks = landmarks(states, cfg)
    assert marks['t1'] is not None
    after = [s for s in states if s.t >= marks['t1']]
    failures = [(s.t, r) for s in after for r in [sandwich_check(s, cfg)] if not (r.lower_ok and r.upper_ok)]
    assert failures == []


@pytest.mark.parametrize('act', ACTS, ids=str)
@pytest.mark.parametrize('D,K,M,eta', [(20, 4, 5, 0.02), (10, 2, 3, 0.05)])
def test_attention_step_size_bound(act, D, K, M, eta):
    """Приращение C2 + C3 за шаг не больше ηMD/(K²(D−K))·√((D+1)/K)"""
    cfg = DynamicsConfig(D=D, K=K, M=M, eta=eta, act=act)
    states, _ = run_dynamics(cfg, 3000, record_every=1)
    bound = eta * M * D / (K * K * (D - K)) * math.sqrt((D + 1) / K)
    steps = [(b.C2 + b.C3) - (a.C2 + a.C3) for a, b in zip(states, states[1:])]
    assert max(steps) <= bound
    assert max(steps) > 0.0


def test_c1_star_uniform_attention():
    assert c1_star(1.0 / 10.0, 10, 2, IDENTITY) == pytest.approx(1.0)


def test_theory_excess_rate():
    assert theory_excess_rate(10, 2, 0.5, 100) == pytest.approx(400.0)
    assert theory_excess_rate(10, 2, 0.5, 200) == pytest.approx(200.0)


@pytest.mark.parametrize('act', ACTS, ids=str)
def test_a_plus_b_is_f3(act):
    D, K = 15, 3
    for p in np.linspace(1.0 / D, 1.0 / K, 11):
        A, B = a_b(p, D, K, act)
        assert A + B == pytest.approx(F3(*plug_variances(p, D, K).f3, act), rel=1e-12, abs=1e-15)
        assert A >= 0.0 and B >= 0.0


@pytest.mark.parametrize('act', ACTS, ids=str)
def test_excess_loss_endpoints(act):
    D, K, M = 10, 2, 4
    assert excess_loss_scalar(1.0, 1.0 / K, D, K, float(M), act) == pytest.approx(0.0, abs=1e-12)
    c = 1.0 if act == IDENTITY else (0.5 if act == RELU else (1 + 0.01) / 2)
    assert excess_loss_scalar(0.0, 0.2, D, K, float(M), act) == pytest.approx(c * D * M / (2 * K))
    with pytest.raises(DomainError):
        excess_loss_scalar(1.0, 0.6, D, K, float(M), act)


def test_s_frobenius_gap_matches_scores(cnn_teacher):
    D, K = cnn_teacher.D, cnn_teacher.K
    P = make_positional_encoding(D).P
    for C2, C3 in [(0.0, 0.0), (1.0, 0.5), (4.0, 6.0)]:
        S = attention_scores(structured_wkq(C2, C3, cnn_teacher.groups, P), P)
        direct = float(np.linalg.norm(S - cnn_teacher.S_star))
        assert s_frobenius_gap(p_from_c(C2, C3, D, K), D, K) == pytest.approx(direct, rel=1e-10, abs=1e-12)


def test_recorded_times_and_rows():
    cfg = DynamicsConfig(D=8, K=2, M=1, eta=0.1, act=RELU)
    states, excess = run_dynamics(cfg, 95, record_every=10)
    assert [s.t for s in states] == [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95]
    assert len(excess) == len(states)
    rows = trajectory_rows(states, excess, cfg)
    assert list(rows[0]) == ['t', 'C1', 'C2', 'C3', 'p', 'C1_star', 'A', 'B', 'excess_loss', 's_frob_gap']
    assert rows[0]['excess_loss'] == pytest.approx(0.5 * 8 / (2 * 2))


def test_identity_rate_and_asymptote():
    """Хвост избыточной потери ~ 1/t, 1 − Kp ~ √(K(D−K)²/(2ηMt))"""
    cfg = DynamicsConfig(D=10, K=2, M=5, eta=0.2, act=IDENTITY)
    T = 100_000
    states, excess = run_dynamics(cfg, T, record_every=100)
    fit = loglog_slope([(s.t, e) for s, e in zip(states[1:], excess[1:])], tail_fraction=0.5)
    assert -1.2 <= fit.slope <= -0.8
    x = 1.0 - cfg.K * states[-1].p
    assert x == pytest.approx(one_minus_kp_asymptote(cfg.D, cfg.K, cfg.M, cfg.eta, T), rel=0.25)
    marks = landmarks(states, cfg, excess, epsilon=excess[-1])
    assert marks['T_star'] is not None
    assert marks['T_star_p'] is None
    assert marks['T_eps'] is not None and marks['T_eps'] <= T


@pytest.mark.parametrize('act', ACTS, ids=str)
def test_dynamics_dk(act):
    eta, T = 0.3, 60
    points = dynamics_dk(eta, act, T, v_norm_sq=2.0)
    assert [pt.t for pt in points] == list(range(T + 1))
    assert points[0].C == 0.0
    for pt in points:
        assert 1.0 - pt.C == pytest.approx(dk_closed_form(eta, act, pt.t), rel=1e-12, abs=1e-15)
        assert pt.excess <= pt.excess_bound * (1 + 1e-12)
    assert points[-1].excess < points[0].excess


def test_dynamics_dk_eta_range():
    with pytest.raises(ConfigError):
        dynamics_dk(0.6, RELU, 10)
    with pytest.raises(ConfigError):
        dynamics_dk(0.0, RELU, 10)


@pytest.mark.slow
@pytest.mark.parametrize('act', ACTS, ids=str)
def test_excess_loss_matches_monte_carlo(act):
    """Скалярная избыточная потеря равна E½‖f* − TF‖² на гауссовых входах для учителя sts"""
    D, K, d = 20, 4, 5
    spec = sts_teacher(d, D, [3, 7, 11, 15], act)
    enc = make_positional_encoding(D)
    cfg = DynamicsConfig(D=D, K=K, M=d, eta=0.02, act=act)
    states, excess = run_dynamics(cfg, 4000, record_every=2000)
    for state, expected in zip(states, excess):
        params = StudentParams(W_V=state.C1 * spec.V_star,
                               W_KQ=structured_wkq(max(state.C2, 0.0), max(state.C3, 0.0), spec.groups, enc.P),
                               encoding=enc, act=act)
        values = []
        for chunk in range(10):
            X = sample_inputs(d, D, 20_000, 'gaussian', seed=11, step=chunk)
            values.append(excess_gap_values(params, spec, X, teacher_forward(spec, X)))
        values = np.concatenate(values)
        se = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(values.mean() - expected) <= 4.0 * se + 1e-12, state.t


@pytest.mark.slow
@pytest.mark.parametrize('act', [IDENTITY, RELU], ids=str)
def test_long_run_rates(act):
    """Избыточная потеря ~ 1/t, √t·‖S − S*‖_F выходит на константу, сэндвич для p после t1"""
    cfg = DynamicsConfig(D=20, K=4, M=5, eta=0.02, act=act)
    states, excess = run_dynamics(cfg, 1_000_000, record_every=1000)
    fit = loglog_slope([(s.t, e) for s, e in zip(states[1:], excess[1:])], tail_fraction=0.5)
    assert -1.2 <= fit.slope <= -0.8
    scaled = [math.sqrt(s.t) * s_frobenius_gap(s.p, cfg.D, cfg.K) for s in states if s.t >= 100_000]
    median = float(np.median(scaled))
    assert all(abs(v - median) <= 0.1 * median for v in scaled)
    marks = landmarks(states, cfg)
    assert marks['t1'] is not None
    failures = [s.t for s in states if s.t >= marks['t1']
                for r in [sandwich_check(s, cfg)] if not (r.lower_ok and r.upper_ok)]
    assert failures == []

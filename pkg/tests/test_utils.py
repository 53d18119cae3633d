"""
Тесты базовых примитивов: активации, кодировки, потоки, запись файлов
"""
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from utils import (IDENTITY, RELU, ActivationKind, ConfigError, DimensionError, DomainError, NumericError,
                   PosAttnError, TeacherIndexError, ValidationError, activation_derivative, apply_activation,
                   atomic_write_text, c_sigma, check_finite, format_float, get_current_timestamp, leaky,
                   make_positional_encoding, make_rng)


def test_activation_values():
    x = np.array([-2.0, 0.0, 3.0])
    assert np.array_equal(apply_activation(x, IDENTITY), x)
    assert np.array_equal(apply_activation(x, RELU), [0.0, 0.0, 3.0])
    assert np.allclose(apply_activation(x, leaky(0.1)), [-0.2, 0.0, 3.0])


def test_activation_scalar_returns_float():
    assert apply_activation(-1.5, RELU) == 0.0
    assert isinstance(apply_activation(2.0, leaky(0.3)), float)
    assert activation_derivative(-1.0, leaky(0.3)) == pytest.approx(0.3)


def test_derivative_at_zero_is_one():
    for act in (IDENTITY, RELU, leaky(0.5)):
        assert activation_derivative(0.0, act) == 1.0


@given(st.floats(min_value=-50, max_value=50, allow_nan=False), st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=200)
def test_leaky_is_mix_of_identity_and_relu(x, kappa):
    """σ_κ(x) = κx + (1−κ)·relu(x)"""
    expected = kappa * x + (1.0 - kappa) * max(x, 0.0)
    assert apply_activation(x, leaky(kappa)) == pytest.approx(expected, abs=1e-12)


def test_activation_parse_aliases():
    assert ActivationKind.parse('linear') == IDENTITY
    assert ActivationKind.parse(' ReLU ') == RELU
    assert ActivationKind.parse('leaky', 0.25) == leaky(0.25)
    # kappa игнорируется для не-leaky
    assert ActivationKind.parse('relu', 0.3) == RELU


def test_activation_validation():
    with pytest.raises(DomainError):
        ActivationKind.parse('leaky')
    with pytest.raises(DomainError):
        leaky(1.0)
    with pytest.raises(ValidationError):
        ActivationKind('relu', 0.5)
    with pytest.raises(ValidationError) as info:
        ActivationKind.parse('tanh')
    assert info.value.key == 'act'


def test_c_sigma():
    assert c_sigma(IDENTITY) == 1.0
    assert c_sigma(RELU) == 0.5
    assert c_sigma(leaky(0.5)) == pytest.approx(0.625)


def test_error_hierarchy():
    assert issubclass(DimensionError, ValueError)
    assert issubclass(ConfigError, ValidationError)
    assert issubclass(TeacherIndexError, IndexError)
    assert issubclass(NumericError, ArithmeticError)
    assert issubclass(NumericError, PosAttnError)
    assert not issubclass(NumericError, ValidationError)


def test_identity_encoding():
    enc = make_positional_encoding(5)
    assert np.array_equal(enc.P, np.eye(5))
    assert enc.D == 5
    with pytest.raises(ValueError):
        enc.P[0, 0] = 2.0


def test_random_orthogonal_encoding():
    enc = make_positional_encoding(7, 'random_orthogonal', seed=11)
    assert np.allclose(enc.P @ enc.P.T, np.eye(7), atol=1e-12)
    again = make_positional_encoding(7, 'random_orthogonal', seed=11)
    other = make_positional_encoding(7, 'random_orthogonal', seed=12)
    assert np.array_equal(enc.P, again.P)
    assert not np.allclose(enc.P, other.P)


def test_encoding_errors():
    with pytest.raises(DimensionError):
        make_positional_encoding(1)
    with pytest.raises(ValidationError):
        make_positional_encoding(4, 'sinusoidal')


def test_rng_streams():
    a = make_rng(5, 'inputs', 3).standard_normal(4)
    b = make_rng(5, 'inputs', 3).standard_normal(4)
    c = make_rng(5, 'noise', 3).standard_normal(4)
    d = make_rng(5, 'inputs', 4).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)
    with pytest.raises(ValidationError):
        make_rng(5, 'weights')


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_float_is_exact(value):
    assert float(format_float(value)) == value


def test_check_finite():
    check_finite(np.ones(3), 'x')
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]), 'x')


def test_atomic_write_text(tmp_path):
    path = tmp_path / 'sub' / 'out.txt'
    atomic_write_text(str(path), "a = 1\n")
    atomic_write_text(str(path), "a = 2\n")
    assert path.read_text(encoding='utf-8') == "a = 2\n"
    assert [name for name in os.listdir(path.parent) if name.startswith('.tmp_')] == []


def test_timestamp_format():
    stamp = get_current_timestamp('UTC')
    assert stamp.endswith('UTC')
    assert len(stamp.split()[0]) == 10

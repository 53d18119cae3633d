"""
Тесты парсеров конфигурации, файлов матриц и траекторий
"""
import numpy as np
import pytest

from attention import StudentParams
from parser import ConfigParser, DataParser
from reports import ReportGenerator
from teachers import teacher_to_text
from utils import IDENTITY, ConfigError, DimensionError, PositionalEncoding, ValidationError, make_positional_encoding


def _params_text(P=None, scheme='identity'):
    enc = make_positional_encoding(4, scheme, seed=3) if P is None else PositionalEncoding(P=P, scheme=scheme)
    params = StudentParams(W_V=np.ones((1, 2)), W_KQ=np.zeros((4, 4)), encoding=enc, act=IDENTITY)
    return ReportGenerator.params_to_text(params)


class TestConfigParser:
    """Тесты файлов 'key = value'"""

    def test_parse_line(self):
        assert ConfigParser.parse_line("eta = 0.05", 1) == (True, ('eta', '0.05'), "")
        assert ConfigParser.parse_line("record-every=10", 2) == (True, ('record_every', '10'), "")
        success, _, error = ConfigParser.parse_line("# комментарий", 3)
        assert not success and error == "Пустая строка"
        success, _, error = ConfigParser.parse_line("eta 0.05", 4)
        assert not success and "Строка 4" in error

    def test_parse_text(self):
        values, errors = ConfigParser.parse_text("seed = 3\n\n# x\nact = relu\nseed = 4\nbroken\n")
        assert values == {'seed': '3', 'act': 'relu'}
        assert len(errors) == 2
        assert "повторно" in errors[0]

    def test_load(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text("D = 8\nK = 2\n", encoding='utf-8')
        assert ConfigParser.load(str(path)) == {'D': '8', 'K': '2'}
        with pytest.raises(ConfigError):
            ConfigParser.load(str(tmp_path / 'missing.cfg'))
        path.write_text("D = 8\nD = 9\n", encoding='utf-8')
        with pytest.raises(ConfigError):
            ConfigParser.load(str(path))

    def test_merge_flags_win(self):
        merged = ConfigParser.merge({'eta': '0.1', 'seed': '1'}, {'eta': 0.2, 'seed': None, 'record-every': 5})
        assert merged == {'eta': 0.2, 'seed': '1', 'record_every': 5}

    def test_parse_numbers(self):
        assert ConfigParser.parse_int('1e3', 'steps') == (True, 1000, "")
        assert ConfigParser.parse_int('10_000', 'steps') == (True, 10000, "")
        assert not ConfigParser.parse_int('2.5', 'steps')[0]
        assert not ConfigParser.parse_int(True, 'steps')[0]
        assert ConfigParser.parse_float('5e-2', 'eta') == (True, 0.05, "")
        success, _, error = ConfigParser.parse_float('fast', 'eta')
        assert not success and error.startswith('eta:')

    def test_parse_bool(self):
        assert ConfigParser.parse_bool('yes', 'x')[1] is True
        assert ConfigParser.parse_bool('нет', 'x')[1] is False
        assert not ConfigParser.parse_bool('maybe', 'x')[0]

    def test_parse_positions(self):
        assert ConfigParser.parse_positions('1,2 5', 'g') == (True, [1, 2, 5], "")
        assert not ConfigParser.parse_positions('', 'g')[0]
        assert not ConfigParser.parse_positions('1,x', 'g')[0]


class TestDataParser:
    """Тесты матриц учителя и траекторий"""

    def test_teacher_round_trip(self, cnn_teacher):
        success, spec, error = DataParser.parse_teacher(teacher_to_text(cnn_teacher))
        assert success, error
        assert spec.groups == cnn_teacher.groups

    def test_bad_teacher_header(self, cnn_teacher):
        assert DataParser.parse_teacher("")[0] is False
        assert DataParser.parse_teacher("2 3 8 relu 0\n")[0] is False
        text = teacher_to_text(cnn_teacher).replace("2 3 8 2 ", "2 3 8 4 ", 1)
        success, _, error = DataParser.parse_teacher(text)
        assert not success and "K" in error

    def test_truncated_teacher(self, cnn_teacher):
        lines = teacher_to_text(cnn_teacher).splitlines()
        success, _, error = DataParser.parse_teacher('\n'.join(lines[:-1]))
        assert not success and error

    def test_teacher_extra_rows(self, cnn_teacher):
        success, _, error = DataParser.parse_teacher(teacher_to_text(cnn_teacher) + "0 0 0 0 0 0 0 0\n")
        assert not success and 'teacher' in error

    def test_params_round_trip(self):
        success, params, error = DataParser.parse_params(_params_text(scheme='random_orthogonal'))
        assert success, error
        assert np.allclose(params.encoding.P.T @ params.encoding.P, np.eye(4))

    def test_params_extra_rows(self):
        success, _, error = DataParser.parse_params(_params_text() + "1 0 0 0\n")
        assert not success and 'params' in error

    def test_params_not_orthonormal(self):
        success, _, error = DataParser.parse_params(_params_text(P=2.0 * np.eye(4)))
        assert not success and 'P' in error

    def test_params_bad_header(self):
        text = _params_text()
        assert DataParser.parse_params(text.replace('identity', 'sinusoidal', 1))[0] is False
        assert DataParser.parse_params(text.replace('1 2 4 ', '1 2 1 ', 1))[0] is False
        with pytest.raises(DimensionError):
            DataParser._check_line_count(['a', 'b', 'c'], 2, 'params')

    def test_load_teacher_errors(self, tmp_path):
        with pytest.raises(ValidationError) as info:
            DataParser.load_teacher(str(tmp_path / 'none.txt'))
        assert info.value.key == 'teacher_file'

    def test_read_trajectory(self, tmp_path):
        path = tmp_path / 'trajectory.csv'
        path.write_text("t,loss\n20,0.1\n0,1.0\n10,0.5\n", encoding='utf-8')
        frame = DataParser.read_trajectory(str(path))
        assert frame['t'].tolist() == [0, 10, 20]
        assert frame['loss'].tolist() == [1.0, 0.5, 0.1]

    def test_read_trajectory_errors(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text("step,loss\n0,1.0\n", encoding='utf-8')
        with pytest.raises(ValidationError):
            DataParser.read_trajectory(str(path))
        path.write_text("t,act\n0,relu\n", encoding='utf-8')
        with pytest.raises(ValidationError):
            DataParser.read_trajectory(str(path))
        with pytest.raises(ValidationError):
            DataParser.read_trajectory(str(tmp_path / 'missing.csv'))

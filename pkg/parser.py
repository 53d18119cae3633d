"""
Модуль парсинга конфигураций, файлов матриц и траекторий
"""
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from attention import StudentParams
from teachers import TeacherSpec, teacher_from_scores
from utils import ENCODING_SCHEMES, ActivationKind, ConfigError, DimensionError, PositionalEncoding, ValidationError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# Допуск на PᵀP = I после записи с 17 значащими цифрами
ORTHONORMAL_TOL = 1e-9


class ConfigParser:
    """Парсер плоских файлов 'key = value'"""

    @staticmethod
    def normalize_key(key: str) -> str:
        """Ключи сравниваются без пробелов, дефисы равны подчеркиваниям"""
        return key.strip().replace('-', '_')

    @staticmethod
    def parse_line(line: str, line_number: int) -> Tuple[bool, Tuple[str, str], str]:
        """
        Разбор строки 'key = value'
        Возвращает: (успех, (ключ, значение), ошибка)
        """
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            return False, ('', ''), "Пустая строка"
        if '=' not in stripped:
            return False, ('', ''), f"Строка {line_number}: нет '='. Строка: '{line}'"
        key, value = stripped.split('=', 1)
        key = ConfigParser.normalize_key(key)
        if not key:
            return False, ('', ''), f"Строка {line_number}: пустой ключ. Строка: '{line}'"
        return True, (key, value.strip()), ""

    @staticmethod
    def parse_text(text: str) -> Tuple[Dict[str, str], List[str]]:
        """
        Разбор всего файла
        Возвращает: (значения, ошибки); повтор ключа считается ошибкой
        """
        values: Dict[str, str] = {}
        errors = []
        for i, line in enumerate(text.splitlines(), 1):
            success, (key, value), error = ConfigParser.parse_line(line, i)
            if not success:
                if 'Пустая строка' not in error:
                    errors.append(error)
                continue
            if key in values:
                errors.append(f"Строка {i}: ключ '{key}' задан повторно")
                continue
            values[key] = value
        return values, errors

    @staticmethod
    def load(path: str) -> Dict[str, str]:
        """Чтение файла конфигурации; любая ошибка разбора -> ConfigError"""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"Не удалось прочитать конфигурацию {path}: {e}", key='config')
        values, errors = ConfigParser.parse_text(text)
        if errors:
            raise ConfigError(f"Ошибки в {path}:\n" + '\n'.join(errors), key='config')
        logger.info(f"Конфигурация {path}: {len(values)} ключей")
        return values

    @staticmethod
    def merge(file_values: Dict[str, str], flag_values: Dict[str, object]) -> Dict[str, object]:
        """Флаги командной строки (не None) перекрывают значения из файла"""
        merged: Dict[str, object] = dict(file_values)
        for key, value in flag_values.items():
            if value is not None:
                merged[ConfigParser.normalize_key(key)] = value
        return merged

    @staticmethod
    def parse_int(value, key: str) -> Tuple[bool, int, str]:
        if isinstance(value, bool):
            return False, 0, f"{key}: ожидалось целое число, получено '{value}'"
        if isinstance(value, int):
            return True, value, ""
        text = str(value).strip().replace('_', '')
        try:
            number = float(text)
        except ValueError:
            return False, 0, f"{key}: ожидалось целое число, получено '{value}'"
        if not math.isfinite(number) or number != int(number):
            return False, 0, f"{key}: ожидалось целое число, получено '{value}'"
        return True, int(number), ""

    @staticmethod
    def parse_float(value, key: str) -> Tuple[bool, float, str]:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value), ""
        try:
            return True, float(str(value).strip().replace('_', '')), ""
        except ValueError:
            return False, 0.0, f"{key}: ожидалось число, получено '{value}'"

    @staticmethod
    def parse_bool(value, key: str) -> Tuple[bool, bool, str]:
        if isinstance(value, bool):
            return True, value, ""
        text = str(value).strip().lower()
        if text in ('1', 'true', 'yes', 'on', 'да'):
            return True, True, ""
        if text in ('0', 'false', 'no', 'off', 'нет'):
            return True, False, ""
        return False, False, f"{key}: ожидалось true/false, получено '{value}'"

    @staticmethod
    def parse_positions(value, key: str) -> Tuple[bool, List[int], str]:
        """Список позиций через запятую или пробел: '1,2,3' или '1 2 3'"""
        if isinstance(value, (list, tuple)):
            items = [str(v) for v in value]
        else:
            items = str(value).replace(',', ' ').split()
        positions = []
        for item in items:
            success, number, error = ConfigParser.parse_int(item, key)
            if not success:
                return False, [], error
            positions.append(number)
        if not positions:
            return False, [], f"{key}: пустой список позиций"
        return True, positions, ""


class DataParser:
    """Чтение матриц учителя, параметров ученика и траекторий"""

    @staticmethod
    def _numeric_rows(lines: List[str], start: int, count: int, width: int, what: str) -> np.ndarray:
        if len(lines) < start + count:
            raise ValidationError(f"{what}: ожидалось {count} строк, файл короче", key=what)
        rows = []
        for offset in range(count):
            line_number = start + offset + 1
            parts = lines[start + offset].split()
            if len(parts) != width:
                raise ValidationError(f"Строка {line_number}: ожидалось {width} чисел, получено {len(parts)}",
                                      key=what)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValidationError(f"Строка {line_number}: неверный формат числа", key=what)
        return np.array(rows)

    @staticmethod
    def _check_line_count(lines: List[str], expected: int, what: str) -> None:
        if len(lines) > expected:
            raise DimensionError(f"{what}: ожидалось {expected} строк с заголовком, получено {len(lines)}", key=what)

    @staticmethod
    def _content_lines(text: str) -> List[str]:
        return [line for line in text.splitlines() if line.strip() and not line.strip().startswith('#')]

    @staticmethod
    def _activation(name: str, kappa_text: str) -> ActivationKind:
        try:
            kappa = float(kappa_text)
        except ValueError:
            raise ValidationError(f"kappa: неверный формат '{kappa_text}'", key='kappa')
        return ActivationKind.parse(name, kappa)

    @staticmethod
    def parse_teacher(text: str) -> Tuple[bool, Optional[TeacherSpec], str]:
        """
        Файл учителя: заголовок 'M d D K act kappa', затем M строк V* и D строк S*
        Возвращает: (успех, учитель, ошибка)
        """
        lines = DataParser._content_lines(text)
        if not lines:
            return False, None, "Файл учителя пуст"
        header = lines[0].split()
        if len(header) != 6:
            return False, None, f"Заголовок должен содержать 'M d D K act kappa', получено '{lines[0]}'"
        try:
            M, d, D, K = (int(v) for v in header[:4])
            if min(M, d, K) < 1 or D < 2:
                raise DimensionError(f"Неверные размеры в заголовке: '{lines[0]}'", key='teacher')
            act = DataParser._activation(header[4], header[5])
            V = DataParser._numeric_rows(lines, 1, M, d, 'V_star')
            S = DataParser._numeric_rows(lines, 1 + M, D, D, 'S_star')
            DataParser._check_line_count(lines, 1 + M + D, 'teacher')
            spec = teacher_from_scores(V, S, act)
        except ValueError as e:
            return False, None, str(e)
        if spec.K != K:
            return False, None, f"K в заголовке ({K}) не совпадает с S* ({spec.K})"
        return True, spec, ""

    @staticmethod
    def load_teacher(path: str) -> TeacherSpec:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ValidationError(f"Не удалось прочитать файл учителя {path}: {e}", key='teacher_file')
        success, spec, error = DataParser.parse_teacher(text)
        if not success:
            raise ValidationError(f"{path}: {error}", key='teacher_file')
        return spec

    @staticmethod
    def parse_params(text: str) -> Tuple[bool, Optional[StudentParams], str]:
        """
        Файл параметров: заголовок 'M d D scheme act kappa', затем строки W_V, W_KQ и P
        Возвращает: (успех, параметры, ошибка)
        """
        lines = DataParser._content_lines(text)
        if not lines:
            return False, None, "Файл параметров пуст"
        header = lines[0].split()
        if len(header) != 6:
            return False, None, f"Заголовок должен содержать 'M d D scheme act kappa', получено '{lines[0]}'"
        try:
            M, d, D = (int(v) for v in header[:3])
            if min(M, d) < 1 or D < 2:
                raise DimensionError(f"Неверные размеры в заголовке: '{lines[0]}'", key='params')
            if header[3] not in ENCODING_SCHEMES:
                raise ValidationError(f"Неизвестная схема кодирования '{header[3]}'", key='encoding')
            act = DataParser._activation(header[4], header[5])
            W_V = DataParser._numeric_rows(lines, 1, M, d, 'W_V')
            W_KQ = DataParser._numeric_rows(lines, 1 + M, D, D, 'W_KQ')
            P = DataParser._numeric_rows(lines, 1 + M + D, D, D, 'P')
            DataParser._check_line_count(lines, 1 + M + 2 * D, 'params')
            deviation = float(np.max(np.abs(P.T @ P - np.eye(D))))
            if deviation > ORTHONORMAL_TOL:
                raise ValidationError(f"P не ортогональна: max|PᵀP − I| = {deviation:.3g}", key='P')
        except ValueError as e:
            return False, None, str(e)
        P.setflags(write=False)
        encoding = PositionalEncoding(P=P, scheme=header[3])
        return True, StudentParams(W_V=W_V, W_KQ=W_KQ, encoding=encoding, act=act), ""

    @staticmethod
    def load_params(path: str) -> StudentParams:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ValidationError(f"Не удалось прочитать файл параметров {path}: {e}", key='params')
        success, params, error = DataParser.parse_params(text)
        if not success:
            raise ValidationError(f"{path}: {error}", key='params')
        return params

    @staticmethod
    def read_trajectory(path: str) -> pd.DataFrame:
        """CSV траектории с обязательной колонкой 't', упорядоченный по t"""
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ValidationError(f"Не удалось прочитать траекторию {path}: {e}", key='trajectory')
        if 't' not in frame.columns:
            raise ValidationError(f"{path}: нет колонки 't'", key='trajectory')
        numeric = frame.select_dtypes(include='number')
        if len(numeric.columns) != len(frame.columns):
            bad = [c for c in frame.columns if c not in numeric.columns]
            raise ValidationError(f"{path}: нечисловые колонки {bad}", key='trajectory')
        return frame.sort_values('t', kind='stable').reset_index(drop=True)

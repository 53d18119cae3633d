"""
Модуль анализа траекторий и генерации отчетов
"""
import logging
import math
import os
from dataclasses import dataclass
from io import StringIO
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from scipy import stats

import config
from attention import StudentParams, groups_to_mask
from utils import DomainError, DimensionError, ValidationError, atomic_target, atomic_write_text, format_float

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# Колонки, для которых в сводке строится наклон в двойном логарифмическом масштабе
SLOPE_COLUMNS = ('excess_train_loss', 'excess_ood_loss', 'excess_loss', 's_frob_gap')


@dataclass(frozen=True)
class SlopeFit:
    """Прямая log(value) = slope·log(t) + intercept по хвосту ряда"""
    slope: float
    intercept: float
    r_squared: float
    tail_fraction: float
    n_points: int


# ---------------------------------------------------------------------------
# Метрики
# ---------------------------------------------------------------------------

def positive_tail(series: Sequence[Tuple[float, float]],
                  floor: float = config.LOSS_FLOOR) -> List[Tuple[float, float]]:
    """Отбросить точки с t <= 0 или значением ниже floor (шум плавающей точки)"""
    kept = [(float(t), float(v)) for t, v in series if t > 0 and v >= floor]
    dropped = len(series) - len(kept)
    if dropped:
        logger.warning(f"Отброшено {dropped} точек ниже порога {floor:g} перед логарифмированием")
    return kept


def loglog_slope(series: Sequence[Tuple[float, float]],
                 tail_fraction: float = config.DEFAULT_TAIL_FRACTION) -> SlopeFit:
    """
    Наклон по методу наименьших квадратов на (log t, log value)
    для последней доли tail_fraction точек
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise DomainError(f"tail_fraction должно быть в (0, 1], получено {tail_fraction}", key='tail_fraction')
    points = [(float(t), float(v)) for t, v in series]
    for t, v in points:
        if not (v > 0 and t > 0):
            raise DomainError(f"Для логарифма нужны t > 0 и значения > 0, получено ({t:g}, {v:g})",
                              key='value')
    n_tail = int(math.ceil(tail_fraction * len(points)))
    if n_tail < config.MIN_FIT_POINTS:
        raise DomainError(f"Для подгонки нужно >= {config.MIN_FIT_POINTS} точек хвоста, есть {n_tail}",
                          key='series')
    tail = np.array(points[-n_tail:])
    fit = stats.linregress(np.log(tail[:, 0]), np.log(tail[:, 1]))
    return SlopeFit(slope=float(fit.slope), intercept=float(fit.intercept), r_squared=float(fit.rvalue ** 2),
                    tail_fraction=float(tail_fraction), n_points=n_tail)


def cosine_similarity(W_V: np.ndarray, V_star: np.ndarray) -> float:
    """⟨W_V, V*⟩_F / (‖W_V‖_F ‖V*‖_F)"""
    a = np.asarray(W_V, dtype=float)
    b = np.asarray(V_star, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"Формы {a.shape} и {b.shape} не совпадают", key='W_V')
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DomainError("Косинус не определен для нулевой матрицы", key='W_V' if norm_a == 0.0 else 'V_star')
    value = float(np.sum(a * b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


def two_value_structure(S: np.ndarray, groups) -> Tuple[float, float, float]:
    """
    (p_hat, off_hat, max_dev): средние внутри и вне групп и максимальное
    отклонение элемента от среднего своего класса
    """
    S = np.asarray(S, dtype=float)
    mask = groups_to_mask(groups, S.shape[0])
    on = S[mask]
    off = S[~mask]
    p_hat = float(on.mean())
    off_hat = float(off.mean()) if off.size else 0.0
    max_dev = float(np.max(np.abs(on - p_hat)))
    if off.size:
        max_dev = max(max_dev, float(np.max(np.abs(off - off_hat))))
    return p_hat, off_hat, max_dev


# ---------------------------------------------------------------------------
# Отчеты
# ---------------------------------------------------------------------------

class ReportGenerator:
    """Генератор CSV, XLSX и тепловых карт"""

    @staticmethod
    def generate_csv(rows) -> str:
        """CSV с заголовком; вещественные числа с 17 значащими цифрами"""
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        output = StringIO()
        frame.to_csv(output, index=False, float_format=f"%.{config.CSV_DIGITS}g", lineterminator='\n')
        return output.getvalue()

    @staticmethod
    def write_csv(rows, path: str) -> str:
        return atomic_write_text(path, ReportGenerator.generate_csv(rows))

    @staticmethod
    def summarize(frame: pd.DataFrame, tail_fraction: float = config.DEFAULT_TAIL_FRACTION) -> List[Dict]:
        """
        Сводка по траектории: для каждой колонки последнее значение,
        для колонок потерь и разрывов еще наклон хвоста
        """
        if 't' not in frame.columns:
            raise ValidationError("В траектории нет колонки 't'", key='t')
        if frame.empty:
            raise ValidationError("Траектория пуста", key='trajectory')
        summary = []
        last = frame.iloc[-1]
        for column in frame.columns:
            if column == 't':
                continue
            row = {'metric': column, 'final_value': float(last[column]), 'slope': float('nan'),
                   'intercept': float('nan'), 'r_squared': float('nan'), 'tail_fraction': float('nan'),
                   'n_points': 0}
            if column in SLOPE_COLUMNS:
                series = positive_tail(list(zip(frame['t'], frame[column])))
                try:
                    fit = loglog_slope(series, tail_fraction)
                    row.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared,
                               tail_fraction=fit.tail_fraction, n_points=fit.n_points)
                except DomainError as e:
                    logger.warning(f"Наклон для '{column}' не построен: {e}")
            summary.append(row)
        return summary

    @staticmethod
    def generate_xlsx(summary: Sequence[Dict], title: str, filename: str) -> str:
        """Сводка в XLSX со стилизованной шапкой; запись через временный файл"""
        wb = Workbook()
        ws = wb.active
        ws.title = "Сводка"

        header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
        header_font = Font(bold=True, color="FFFFFF", size=11)
        border = Border(
            left=Side(style='thin'),
            right=Side(style='thin'),
            top=Side(style='thin'),
            bottom=Side(style='thin')
        )

        ws['A1'] = title
        ws['A1'].font = Font(bold=True, size=14)

        headers = ['Метрика', 'Последнее значение', 'Наклон', 'Сдвиг', 'R²', 'Доля хвоста', 'Точек']
        keys = ['metric', 'final_value', 'slope', 'intercept', 'r_squared', 'tail_fraction', 'n_points']
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=3, column=col, value=header)
            cell.font = header_font
            cell.fill = header_fill
            cell.alignment = Alignment(horizontal='center', vertical='center')
            cell.border = border

        for row_num, row_data in enumerate(summary, 4):
            for col, key in enumerate(keys, 1):
                value = row_data.get(key)
                if isinstance(value, float) and not math.isfinite(value):
                    value = None
                cell = ws.cell(row=row_num, column=col, value=value)
                cell.alignment = Alignment(horizontal='left' if col == 1 else 'right', vertical='center')
                cell.border = border

        # Подгонка ширины столбцов
        for column in ws.columns:
            max_length = max((len(str(cell.value)) for cell in column if cell.value is not None), default=0)
            ws.column_dimensions[column[0].column_letter].width = max_length + 2

        tmp_path = atomic_target(filename)
        try:
            wb.save(tmp_path)
            os.replace(tmp_path, filename)
        except OSError as e:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise ValidationError(f"Не удалось записать {filename}: {e}", key='xlsx')
        return filename

    @staticmethod
    def heatmap_csv(matrix: np.ndarray) -> str:
        """Матрица как CSV: заголовок с номерами столбцов с 1"""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        frame = pd.DataFrame(matrix, columns=[str(j + 1) for j in range(matrix.shape[1])])
        return ReportGenerator.generate_csv(frame)

    @staticmethod
    def heatmap_pgm(matrix: np.ndarray) -> str:
        """
        PGM P2: неотрицательная матрица линейно в 0..255 по [0, max],
        знакопеременная по [min, max]
        """
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if not np.all(np.isfinite(matrix)):
            raise DomainError("Тепловая карта: нечисловые значения", key='matrix')
        low = min(0.0, float(matrix.min()))
        span = float(matrix.max()) - low
        if span > 0:
            levels = np.rint((matrix - low) / span * 255.0).astype(int)
        else:
            levels = np.zeros(matrix.shape, dtype=int)
        height, width = levels.shape
        lines = ['P2', f"{width} {height}", '255']
        lines.extend(' '.join(str(v) for v in row) for row in levels)
        return '\n'.join(lines) + '\n'

    @staticmethod
    def params_to_text(params: StudentParams) -> str:
        """
        Параметры ученика: заголовок 'M d D scheme act kappa', затем строки W_V, W_KQ и P
        """
        M, d = params.W_V.shape
        kappa = params.act.kappa if params.act.kappa is not None else 0.0
        lines = [f"{M} {d} {params.D} {params.encoding.scheme} {params.act.short_name} {format_float(kappa)}"]
        for block in (params.W_V, params.W_KQ, params.encoding.P):
            for row in block:
                lines.append(' '.join(format_float(v) for v in row))
        return '\n'.join(lines) + '\n'

    @staticmethod
    def format_summary_text(summary: Sequence[Dict], title: Optional[str] = None) -> str:
        """Короткая текстовая сводка для вывода в терминал"""
        result = []
        if title:
            result.append(title)
        result.append(f"{'Метрика':<22} {'Последнее':>14} {'Наклон':>10} {'R²':>8}")
        result.append("-" * 58)
        for row in summary:
            slope = row['slope']
            slope_text = f"{slope:>10.4f}" if math.isfinite(slope) else f"{'-':>10}"
            r2 = row['r_squared']
            r2_text = f"{r2:>8.4f}" if math.isfinite(r2) else f"{'-':>8}"
            result.append(f"{row['metric']:<22} {row['final_value']:>14.6g} {slope_text} {r2_text}")
        return '\n'.join(result)

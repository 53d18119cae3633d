"""
Точка входа командной строки: проверка ожиданий, скалярная динамика,
обучение, анализ траекторий и тепловые карты
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

import config
from attention import attention_scores
from dynamics import (DynamicsConfig, dynamics_dk, landmarks, one_minus_kp_asymptote, run_dynamics,
                      theory_excess_rate, trajectory_rows)
from expectations import verify_table
from parser import ConfigParser, DataParser
from reports import ReportGenerator, loglog_slope, positive_tail
from teachers import build_teacher, teacher_to_text
from trainer import TrainConfig, train, train_full_transformer, worst_case_gap
from utils import (ActivationKind, ConfigError, DomainError, NumericError, ValidationError, atomic_write_text,
                   format_float, get_current_timestamp)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

REQUIRED = object()

# Ключи манифеста, которые не являются параметрами запуска
META_KEYS = ('command', 'version', 'timestamp')
OUTPUT_PREFIX = 'output.'


class UsageError(ValidationError):
    """Ошибка разбора аргументов командной строки"""


class CliArgumentParser(argparse.ArgumentParser):
    """argparse с кодом выхода 1 вместо 2 при ошибке использования"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Схемы параметров: ключ -> (тип, значение по умолчанию)
# ---------------------------------------------------------------------------

COMMON_KEYS = {
    'seed': ('int', config.DEFAULT_SEED),
    'threads': ('int', config.MAX_THREADS),
    'out': ('str', '.'),
}

ACT_KEYS = {
    'act': ('str', 'identity'),
    'kappa': ('float', None),
}

TEACHER_KEYS = {
    'teacher': ('str', None),
    'teacher_file': ('str', None),
    'd': ('int', 5),
    'D': ('int', None),
    'K': ('int', None),
    'M': ('int', None),
    'g': ('positions', None),
    'i_star': ('int', 1),
    **ACT_KEYS,
}

BATCH_KEYS = {
    'eta': ('float', config.DEFAULT_ETA),
    'steps': ('int', config.DEFAULT_STEPS),
    'batch': ('int', config.DEFAULT_BATCH),
    'noise': ('float', config.DEFAULT_NOISE_SCALE),
    'input_dist': ('str', 'gaussian'),
    'df': ('float', config.DEFAULT_STUDENT_T_DF),
    'encoding': ('str', 'identity'),
    'column_orbit': ('bool', False),
}

SCHEMAS = {
    'verify-expectations': {
        **COMMON_KEYS,
        'n': ('int', 1_000_000),
        'tuples': ('int', 20),
    },
    'simulate-dynamics': {
        **COMMON_KEYS,
        **ACT_KEYS,
        'D': ('int', REQUIRED),
        'K': ('int', REQUIRED),
        'M': ('int', 5),
        'eta': ('float', config.DEFAULT_ETA),
        'steps': ('int', config.DEFAULT_STEPS),
        'record_every': ('int', config.DEFAULT_RECORD_EVERY),
        'epsilon': ('float', None),
    },
    'train': {
        **COMMON_KEYS,
        **TEACHER_KEYS,
        **BATCH_KEYS,
        'record_every': ('int', config.DEFAULT_RECORD_EVERY),
        'ood_dist': ('str', config.DEFAULT_OOD_DIST),
        'ood_batch': ('int', config.DEFAULT_OOD_BATCH),
        'worst_case': ('int', 0),
    },
    'analyze': {
        **COMMON_KEYS,
        'trajectory': ('str', REQUIRED),
        'tail_fraction': ('float', config.DEFAULT_TAIL_FRACTION),
        'xlsx': ('bool', False),
    },
    'export-heatmap': {
        **COMMON_KEYS,
        'params': ('str', None),
        'teacher_file': ('str', None),
    },
    'demo-full-transformer': {
        **COMMON_KEYS,
        **TEACHER_KEYS,
        **BATCH_KEYS,
    },
}


def resolve_values(command: str, file_values: Dict[str, str], flag_values: Dict[str, object]) -> Dict[str, object]:
    """
    Слияние файла и флагов, приведение типов и проверка обязательных ключей.
    Ошибка называет ключ: 'D: required'
    """
    schema = SCHEMAS[command]
    merged = ConfigParser.merge(file_values, flag_values)
    for key in merged:
        if key in META_KEYS or key.startswith(OUTPUT_PREFIX) or key == 'config':
            continue
        if key not in schema:
            raise ConfigError(f"{key}: неизвестный ключ для '{command}'", key=key)
    resolved: Dict[str, object] = {}
    parsers: Dict[str, Callable] = {
        'int': ConfigParser.parse_int,
        'float': ConfigParser.parse_float,
        'bool': ConfigParser.parse_bool,
        'positions': ConfigParser.parse_positions,
    }
    for key, (kind, default) in schema.items():
        raw = merged.get(key)
        if raw is None or raw == '':
            if default is REQUIRED:
                raise ConfigError(f"{key}: required", key=key)
            resolved[key] = default
            continue
        if kind == 'str':
            resolved[key] = str(raw).strip()
            continue
        success, value, error = parsers[kind](raw, key)
        if not success:
            raise ConfigError(error, key=key)
        resolved[key] = value
    if resolved.get('threads') is not None and resolved['threads'] < 1:
        raise ConfigError(f"threads должно быть >= 1, получено {resolved['threads']}", key='threads')
    return resolved


# ---------------------------------------------------------------------------
# Манифест запуска
# ---------------------------------------------------------------------------

def _manifest_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    return str(value)


@dataclass
class RunManifest:
    """Команда, итоговые параметры, версия и пути вывода; пишется до вычислений"""
    command: str
    values: Dict[str, object]
    seed: int
    version: str = config.VERSION
    outputs: Dict[str, str] = field(default_factory=dict)
    timestamp: str = ''

    def to_text(self) -> str:
        lines = [
            f"command = {self.command}",
            f"version = {self.version}",
            f"timestamp = {self.timestamp or get_current_timestamp()}",
        ]
        for key in sorted(self.values):
            value = self.values[key]
            if value is not None:
                lines.append(f"{key} = {_manifest_value(value)}")
        for name in sorted(self.outputs):
            lines.append(f"{OUTPUT_PREFIX}{name} = {self.outputs[name]}")
        return '\n'.join(lines) + '\n'

    def write(self, path: str) -> str:
        return atomic_write_text(path, self.to_text())


def _outputs(values: Dict[str, object], names: Dict[str, str]) -> Dict[str, str]:
    out = str(values['out'])
    return {name: os.path.join(out, filename) for name, filename in names.items()}


def _start(command: str, values: Dict[str, object], outputs: Dict[str, str]) -> None:
    manifest = RunManifest(command=command, values=values, seed=int(values['seed']), outputs=outputs)
    path = manifest.write(os.path.join(str(values['out']), 'manifest.txt'))
    print(f"[INFO] {command}: манифест {path}")


def _activation(values: Dict[str, object]) -> ActivationKind:
    return ActivationKind.parse(str(values['act']), values.get('kappa'))


def _teacher(values: Dict[str, object]):
    if values.get('teacher_file'):
        return DataParser.load_teacher(str(values['teacher_file']))
    if values.get('D') is None:
        raise ConfigError("D: required", key='D')
    if not values.get('teacher'):
        raise ConfigError("teacher: required", key='teacher')
    return build_teacher(str(values['teacher']), int(values['d']), int(values['D']), _activation(values),
                         int(values['seed']), K=values.get('K'), M=values.get('M'), g=values.get('g'),
                         i_star=int(values['i_star']))


def _train_config(values: Dict[str, object], **overrides) -> TrainConfig:
    settings = dict(
        eta=float(values['eta']), T=int(values['steps']), N=int(values['batch']), seed=int(values['seed']),
        noise_scale=float(values['noise']), input_dist=str(values['input_dist']), df=float(values['df']),
        encoding=str(values['encoding']), column_orbit=bool(values['column_orbit']),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def _slope_line(name: str, series) -> Optional[str]:
    try:
        fit = loglog_slope(positive_tail(series))
    except DomainError as e:
        logger.warning(f"Наклон '{name}' не построен: {e}")
        return None
    return f"{name}: наклон {fit.slope:.4f} (R² = {fit.r_squared:.4f}, точек {fit.n_points})"


# ---------------------------------------------------------------------------
# Подкоманды
# ---------------------------------------------------------------------------

def run_verify_expectations(values: Dict[str, object]) -> int:
    if int(values['n']) < config.MC_MIN_SAMPLES:
        raise ConfigError(f"n должно быть >= {config.MC_MIN_SAMPLES}, получено {values['n']}", key='n')
    if int(values['tuples']) < 1:
        raise ConfigError(f"tuples должно быть >= 1, получено {values['tuples']}", key='tuples')
    outputs = _outputs(values, {'expectations': 'expectations.csv'})
    _start('verify-expectations', values, outputs)
    rows = verify_table(int(values['n']), int(values['seed']), int(values['tuples']),
                        threads=int(values['threads']))
    ReportGenerator.write_csv(rows, outputs['expectations'])
    worst = max(abs(row['z_score']) for row in rows)
    failed = sum(1 for row in rows if abs(row['z_score']) > 4.0)
    if failed:
        print(f"[WARNING] {failed} из {len(rows)} проверок с |z| > 4 (максимум {worst:.2f})")
    else:
        print(f"[OK] {len(rows)} проверок, максимум |z| = {worst:.2f}")
    print(f"[OK] {outputs['expectations']}")
    return 0


def run_simulate_dynamics(values: Dict[str, object]) -> int:
    act = _activation(values)
    D, K, M = int(values['D']), int(values['K']), int(values['M'])
    eta, steps = float(values['eta']), int(values['steps'])
    if steps < 1:
        raise ConfigError(f"steps должно быть >= 1, получено {steps}", key='steps')
    if int(values['record_every']) < 1:
        raise ConfigError(f"record_every должно быть >= 1, получено {values['record_every']}", key='record_every')
    cfg = DynamicsConfig(D=D, K=K, M=M, eta=eta, act=act)
    if D == K:
        outputs = _outputs(values, {'dynamics': 'dynamics_dk.csv'})
        points = dynamics_dk(eta, act, steps, v_norm_sq=float(M))
        _start('simulate-dynamics', values, outputs)
        rows = [point._asdict() for point in points]
        ReportGenerator.write_csv(rows, outputs['dynamics'])
        print(f"[OK] D = K: итоговая избыточная потеря {points[-1].excess:.6g}")
        print(f"[OK] {outputs['dynamics']}")
        return 0

    outputs = _outputs(values, {'dynamics': 'dynamics.csv'})
    _start('simulate-dynamics', values, outputs)
    states, excess = run_dynamics(cfg, steps, int(values['record_every']))
    ReportGenerator.write_csv(trajectory_rows(states, excess, cfg), outputs['dynamics'])
    marks = landmarks(states, cfg, excess, epsilon=values.get('epsilon'))
    print("[OK] Ориентиры: " + ', '.join(f"{k} = {v}" for k, v in marks.items()))
    line = _slope_line('excess_loss', [(s.t, e) for s, e in zip(states, excess)])
    if line:
        print(f"[OK] {line}")
    if act.kind == 'identity' and states[-1].t > 0:
        predicted = one_minus_kp_asymptote(D, K, M, eta, states[-1].t)
        print(f"[OK] 1 − Kp = {1.0 - K * states[-1].p:.6g}, асимптотика {predicted:.6g}")
    if states[-1].t > 0:
        order = theory_excess_rate(D, K, eta, states[-1].t)
        print(f"[OK] Порядок K·D⁴/(η·t) = {order:.6g}, наблюдаемая потеря {excess[-1]:.6g}")
    print(f"[OK] {outputs['dynamics']}")
    return 0


def run_train(values: Dict[str, object]) -> int:
    teacher = _teacher(values)
    cfg = _train_config(values, record_every=int(values['record_every']), ood_dist=str(values['ood_dist']),
                        ood_N=int(values['ood_batch']))
    if int(values['worst_case']) < 0:
        raise ConfigError(f"worst_case должно быть >= 0, получено {values['worst_case']}", key='worst_case')
    names = {'trajectory': 'trajectory.csv', 'params': 'params.txt', 'teacher': 'teacher.txt',
             'attention_csv': 'attention.csv', 'attention_pgm': 'attention.pgm'}
    if int(values['worst_case']) > 0:
        names['worst_case'] = 'worst_case.csv'
    outputs = _outputs(values, names)
    _start('train', values, outputs)
    atomic_write_text(outputs['teacher'], teacher_to_text(teacher))

    params, records = train(cfg, teacher)
    ReportGenerator.write_csv([r.as_row() for r in records], outputs['trajectory'])
    atomic_write_text(outputs['params'], ReportGenerator.params_to_text(params))
    S = attention_scores(params.W_KQ, params.encoding.P)
    atomic_write_text(outputs['attention_csv'], ReportGenerator.heatmap_csv(S))
    atomic_write_text(outputs['attention_pgm'], ReportGenerator.heatmap_pgm(S))

    last = records[-1]
    print(f"[OK] t = {last.t}: excess_train = {last.excess_train_loss:.6g}, "
          f"excess_ood = {last.excess_ood_loss:.6g}, cos = {last.cosine_sim:.4f}, "
          f"max|S − S*| = {float(np.max(np.abs(S - teacher.S_star))):.4f}")
    for name in ('excess_train_loss', 'excess_ood_loss'):
        line = _slope_line(name, [(r.t, getattr(r, name)) for r in records])
        if line:
            print(f"[OK] {line}")
    if 'worst_case' in outputs:
        estimate = worst_case_gap(teacher, params, int(values['worst_case']), int(values['seed']))
        ReportGenerator.write_csv([estimate._asdict()], outputs['worst_case'])
        print(f"[OK] Разрыв худшего случая {estimate.gap:.6g} ± {estimate.se:.2g} (z = {estimate.z:.2f})")
    print(f"[OK] Результаты в {values['out']}")
    return 0


def run_analyze(values: Dict[str, object]) -> int:
    frame = DataParser.read_trajectory(str(values['trajectory']))
    names = {'summary': 'summary.csv'}
    if values['xlsx']:
        names['summary_xlsx'] = 'summary.xlsx'
    outputs = _outputs(values, names)
    _start('analyze', values, outputs)
    summary = ReportGenerator.summarize(frame, float(values['tail_fraction']))
    ReportGenerator.write_csv(summary, outputs['summary'])
    if 'summary_xlsx' in outputs:
        ReportGenerator.generate_xlsx(summary, f"Сводка: {values['trajectory']}", outputs['summary_xlsx'])
    print(ReportGenerator.format_summary_text(summary))
    print(f"[OK] {', '.join(outputs.values())}")
    return 0


def run_export_heatmap(values: Dict[str, object]) -> int:
    if not values.get('params') and not values.get('teacher_file'):
        raise ConfigError("params: required", key='params')
    names = {}
    if values.get('params'):
        names.update(attention_csv='attention.csv', attention_pgm='attention.pgm')
    if values.get('teacher_file'):
        names.update(teacher_csv='teacher_scores.csv', teacher_pgm='teacher_scores.pgm')
    params = DataParser.load_params(str(values['params'])) if values.get('params') else None
    teacher = DataParser.load_teacher(str(values['teacher_file'])) if values.get('teacher_file') else None
    outputs = _outputs(values, names)
    _start('export-heatmap', values, outputs)
    if params is not None:
        S = attention_scores(params.W_KQ, params.encoding.P)
        atomic_write_text(outputs['attention_csv'], ReportGenerator.heatmap_csv(S))
        atomic_write_text(outputs['attention_pgm'], ReportGenerator.heatmap_pgm(S))
    if teacher is not None:
        atomic_write_text(outputs['teacher_csv'], ReportGenerator.heatmap_csv(teacher.S_star))
        atomic_write_text(outputs['teacher_pgm'], ReportGenerator.heatmap_pgm(teacher.S_star))
    print(f"[OK] {', '.join(outputs.values())}")
    return 0


def run_demo_full_transformer(values: Dict[str, object]) -> int:
    teacher = _teacher(values)
    cfg = _train_config(values)
    outputs = _outputs(values, {'xx_csv': 'wkq_xx.csv', 'xx_pgm': 'wkq_xx.pgm', 'pp_csv': 'wkq_pp.csv',
                                'pp_pgm': 'wkq_pp.pgm', 'losses': 'full_losses.csv'})
    _start('demo-full-transformer', values, outputs)
    params, losses = train_full_transformer(cfg, teacher)
    d = teacher.d
    blocks = {'xx': params.Wt_KQ[:d, :d], 'pp': params.Wt_KQ[d:, d:]}
    for name, block in blocks.items():
        atomic_write_text(outputs[f'{name}_csv'], ReportGenerator.heatmap_csv(block))
        atomic_write_text(outputs[f'{name}_pgm'], ReportGenerator.heatmap_pgm(block))
    ReportGenerator.write_csv([{'t': t, 'batch_loss': loss} for t, loss in enumerate(losses)], outputs['losses'])
    if losses:
        print(f"[OK] Потеря полного трансформера: {losses[0]:.6g} -> {losses[-1]:.6g}")
    print(f"[OK] Блоки W̃_KQ в {values['out']}")
    return 0


COMMANDS = {
    'verify-expectations': run_verify_expectations,
    'simulate-dynamics': run_simulate_dynamics,
    'train': run_train,
    'analyze': run_analyze,
    'export-heatmap': run_export_heatmap,
    'demo-full-transformer': run_demo_full_transformer,
}


# ---------------------------------------------------------------------------
# Разбор аргументов
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument('--config', help="Файл 'key = value'; флаги перекрывают его значения")
    sub.add_argument('--seed', help="Мастер-сид")
    sub.add_argument('--threads', help="Число рабочих потоков")
    sub.add_argument('--out', help="Каталог результатов")


def _add_act(sub: argparse.ArgumentParser) -> None:
    sub.add_argument('--act', help=' | '.join(config.ACTIVATIONS))
    sub.add_argument('--kappa', help="Наклон leaky в (0, 1)")


def _add_teacher(sub: argparse.ArgumentParser) -> None:
    sub.add_argument('--teacher', help="cnn | gcn | sts | gslp")
    sub.add_argument('--teacher-file', dest='teacher_file', help="Файл учителя 'M d D K act kappa' + V* + S*")
    sub.add_argument('--d', dest='d', help="Размер признаков")
    sub.add_argument('--D', dest='D', help="Число позиций")
    sub.add_argument('--K', dest='K', help="Размер группы")
    sub.add_argument('--M', dest='M', help="Число строк V* (cnn, gcn)")
    sub.add_argument('--g', help="Позиции sts через запятую, с 1")
    sub.add_argument('--i-star', dest='i_star', help="Позиция gslp, с 1")
    _add_act(sub)


def _add_batch(sub: argparse.ArgumentParser) -> None:
    sub.add_argument('--eta', help="Шаг обучения")
    sub.add_argument('--steps', help="Число шагов")
    sub.add_argument('--batch', help="Размер пакета")
    sub.add_argument('--noise', help="Масштаб шума меток")
    sub.add_argument('--input-dist', dest='input_dist', help=', '.join(config.INPUT_DISTRIBUTIONS))
    sub.add_argument('--df', help="Степени свободы student_t")
    sub.add_argument('--encoding', help="identity | random_orthogonal")
    sub.add_argument('--column-orbit', dest='column_orbit', action='store_true', default=None,
                     help="Добавлять все циклические сдвиги столбцов")


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(prog='posattn', description="Позиционное внимание и билинейные учителя")
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True

    sub = subparsers.add_parser('verify-expectations', help="Замкнутые формы против Монте-Карло")
    _add_common(sub)
    sub.add_argument('--n', help="Число выборок Монте-Карло (>= 10000)")
    sub.add_argument('--tuples', help="Наборов аргументов на функцию и активацию")

    sub = subparsers.add_parser('simulate-dynamics', help="Скалярная динамика (C1, C2, C3)")
    _add_common(sub)
    _add_act(sub)
    sub.add_argument('--D', dest='D', help="Число позиций")
    sub.add_argument('--K', dest='K', help="Размер группы")
    sub.add_argument('--M', dest='M', help="Число строк V*")
    sub.add_argument('--eta', help="Шаг обучения")
    sub.add_argument('--steps', help="Число шагов")
    sub.add_argument('--record-every', dest='record_every', help="Шаг записи траектории")
    sub.add_argument('--epsilon', help="Уровень потери для ориентира T_eps")

    sub = subparsers.add_parser('train', help="Эмпирическое обучение на пакетах")
    _add_common(sub)
    _add_teacher(sub)
    _add_batch(sub)
    sub.add_argument('--record-every', dest='record_every', help="Шаг записи метрик")
    sub.add_argument('--ood-dist', dest='ood_dist', help=', '.join(config.INPUT_DISTRIBUTIONS))
    sub.add_argument('--ood-batch', dest='ood_batch', help="Размер OOD-пакета")
    sub.add_argument('--worst-case', dest='worst_case', help="Выборок для разрыва худшего случая (0 - нет)")

    sub = subparsers.add_parser('analyze', help="Наклоны и итоговые метрики траектории")
    _add_common(sub)
    sub.add_argument('--trajectory', help="CSV траектории")
    sub.add_argument('--tail-fraction', dest='tail_fraction', help="Доля хвоста для наклона")
    sub.add_argument('--xlsx', action='store_true', default=None, help="Дополнительно сводка в XLSX")

    sub = subparsers.add_parser('export-heatmap', help="Тепловые карты внимания (CSV + PGM)")
    _add_common(sub)
    sub.add_argument('--params', help="Файл параметров ученика")
    sub.add_argument('--teacher-file', dest='teacher_file', help="Файл учителя")

    sub = subparsers.add_parser('demo-full-transformer', help="Полный трансформер на Z = [X; P]")
    _add_common(sub)
    _add_teacher(sub)
    _add_batch(sub)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Разбор argv и запуск подкоманды.
    Коды выхода: 0 - успех, 1 - ошибка проверки или использования, 2 - численный сбой
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        flags = {k: v for k, v in vars(args).items() if k not in ('command', 'config')}
        file_values = ConfigParser.load(args.config) if args.config else {}
        values = resolve_values(args.command, file_values, flags)
        return COMMANDS[args.command](values)
    except SystemExit as e:
        return int(e.code or 0)
    except NumericError as e:
        logger.error(f"Численный сбой: {e}")
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2
    except ValidationError as e:
        logger.error(f"Ошибка параметров: {e}")
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1


def main() -> int:
    logging.basicConfig(format='%(asctime)s - %(name)s - %(levelname)s - %(message)s', level=logging.INFO)
    return dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())

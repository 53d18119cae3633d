# Конфигурационный файл posattn
import os

# Версия библиотеки (пишется в манифест запуска)
VERSION = '1.0.0'

# Временная зона для отметок времени в манифесте
TIMEZONE = os.getenv('POSATTN_TIMEZONE', 'Europe/Riga')

# Параметры обучения по умолчанию (протокол синтетического эксперимента)
DEFAULT_ETA = float(os.getenv('POSATTN_ETA', '0.05'))
DEFAULT_STEPS = int(os.getenv('POSATTN_STEPS', '1000'))
DEFAULT_BATCH = int(os.getenv('POSATTN_BATCH', '100'))
DEFAULT_NOISE_SCALE = float(os.getenv('POSATTN_NOISE', '1.0'))
DEFAULT_SEED = int(os.getenv('POSATTN_SEED', '0'))
DEFAULT_RECORD_EVERY = int(os.getenv('POSATTN_RECORD_EVERY', '10'))

# OOD-распределение по умолчанию и размер отложенной OOD-выборки
DEFAULT_OOD_DIST = os.getenv('POSATTN_OOD_DIST', 'exponential_centered')
DEFAULT_OOD_BATCH = int(os.getenv('POSATTN_OOD_BATCH', '100'))
DEFAULT_STUDENT_T_DF = 5.0

# Поддерживаемые распределения входов
INPUT_DISTRIBUTIONS = ['gaussian', 'exponential_centered', 'student_t', 'gumbel_centered']

# Семейства учителей и активации
TEACHER_FAMILIES = ['cnn', 'gcn', 'sts', 'gslp']
ACTIVATIONS = ['identity', 'relu', 'leaky']

# Худший случай OOD: константа c' и нижний порог события A
WORST_CASE_C_PRIME = 0.5
WORST_CASE_FLOOR = 1.0

# Аварийная остановка: потеря выросла в столько раз относительно начальной
DIVERGENCE_FACTOR = 1e6

# Точки с потерей ниже этого уровня отбрасываются перед логарифмом
LOSS_FLOOR = 1e-12

# Доля хвоста для оценки наклона log-log
DEFAULT_TAIL_FRACTION = 0.5

# Минимальное число точек для оценки наклона
MIN_FIT_POINTS = 10

# Пороги ориентиров динамики
BURN_IN_FRACTION = 0.95
KP_LANDMARK = 0.5

# Монте-Карло
MC_MIN_SAMPLES = 10_000
MC_CHUNK = 200_000

# Верхняя граница показателя экспоненты при вычислении p
EXP_CLAMP = 700.0

# Формат CSV
CSV_DIGITS = 17

# Число потоков Монте-Карло по умолчанию
MAX_THREADS = int(os.getenv('POSATTN_THREADS', '1'))

# Попытка загрузить локальные переопределения (если есть)
try:
    from config_local import *  # noqa: F401,F403
except ImportError:
    pass

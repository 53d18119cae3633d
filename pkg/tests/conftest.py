"""
Общие фикстуры тестов
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from teachers import (cnn_pooling_teacher, contiguous_partition, cycle_adjacency, gcn_regular_teacher,  # noqa: E402
                      gslp_teacher, sample_unit_rows, sts_teacher)
from utils import IDENTITY, RELU, leaky  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def cnn_teacher():
    """CNN с пулингом: d=3, D=8, K=2, M=2"""
    return cnn_pooling_teacher(3, 8, 2, contiguous_partition(8, 2), sample_unit_rows(2, 3, seed=1), IDENTITY)


@pytest.fixture
def gcn_teacher():
    """GCN на цикле из 6 вершин: K=3"""
    return gcn_regular_teacher(3, 6, cycle_adjacency(6), sample_unit_rows(2, 3, seed=2), RELU)


@pytest.fixture
def sts_small():
    """Выбор токенов 2 и 5 из 6, d=3"""
    return sts_teacher(3, 6, [2, 5], IDENTITY)


@pytest.fixture
def gslp_small():
    return gslp_teacher(4, 5, 3, sample_unit_rows(1, 4, seed=3)[0], leaky(0.2))


@pytest.fixture
def all_teachers(cnn_teacher, gcn_teacher, sts_small, gslp_small):
    return [cnn_teacher, gcn_teacher, sts_small, gslp_small]

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import expit

from core_model import Batch, Example, SparseVector, Stream


def random_batch(rng, time_index, rows, dim, density=0.4, theta=None):
    """Случайный разреженный батч; метки ~ Bernoulli(σ(θᵀx)) если θ задан"""
    matrix = sp.random(rows, dim, density=density, format='csr', random_state=rng, data_rvs=rng.standard_normal)
    if theta is None:
        labels = rng.integers(0, 2, size=rows)
    else:
        labels = (rng.random(rows) < expit(matrix @ theta)).astype(np.int8)
    return Batch.from_arrays(time_index, matrix, labels)


def random_stream(rng, batches, rows, dim, density=0.4, theta=None):
    return Stream(tuple(random_batch(rng, t, rows, dim, density, theta) for t in range(batches)))


def example(pairs, label, weight=1.0):
    return Example(SparseVector.from_pairs(pairs), label, weight)


def write_indexed(path, lines):
    path.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)

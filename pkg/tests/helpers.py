"""Shared random-instance builders for the test suite."""

import numpy as np

from deqflow.equilibrium import ModelParams
from deqflow.losses import Dataset, LossSpec


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


def random_params(rng, m, m_y=1, gamma=0.8, scale=1.0):
    return ModelParams(
        scale * rng.standard_normal((m, m)), scale * rng.standard_normal((m_y, m)), gamma
    )


def random_regression(rng, m, n, m_y=1):
    return Dataset(rng.standard_normal((m, n)), rng.standard_normal((m_y, n)))


def random_binary(rng, m, n):
    return Dataset(
        rng.standard_normal((m, n)),
        (rng.random((1, n)) < 0.5).astype(float),
        kind="binary_labels",
    )


SQUARE = LossSpec("square")
LOGISTIC = LossSpec("logistic", tau=0.1)

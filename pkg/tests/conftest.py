import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from altkoop import init_params
from altkoop.objective import TrajectoryDataset

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACTIVATIONS = ("tanh", "logistic", "arctan")


def random_instance(rng, d=None, widths=None, n=None, activation=None, augment=None, scale=1.0):
    """Random (params, K, data) with small dimensions."""
    d = int(rng.integers(1, 5)) if d is None else d
    if widths is None:
        widths = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4)))]
    n = int(rng.integers(2, 21)) if n is None else n
    activation = str(rng.choice(ACTIVATIONS)) if activation is None else activation
    augment = bool(rng.integers(0, 2)) if augment is None else augment
    params = init_params(d, widths, activation, augment, rng)
    X = scale * rng.uniform(-1.0, 1.0, size=(n + 1, d))
    data = TrajectoryDataset.from_states(X)
    K = rng.uniform(-1.0, 1.0, size=(params.lift_dim, params.lift_dim))
    return params, K, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

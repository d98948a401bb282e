import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "dmlrc",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dmlrc"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def normal_equations(X, y):
    """Independent least-squares oracle: solve (A'A) b = A'y with an intercept column."""
    A = np.column_stack([np.ones(len(y)), X])
    return np.linalg.solve(A.T @ A, A.T @ y)

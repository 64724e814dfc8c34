import numpy as np
import pytest

from recallcor.data_model import CaseControlData
from recallcor.glm import expit


def random_dataset(rng, n=400, p=2, effect=0.6, intercept_y=-1.0):
    """Confounded binary-exposure dataset with both outcome classes present."""
    while True:
        x = rng.normal(size=(n, p))
        t = (rng.random(n) < expit(-0.5 + x @ rng.normal(0.6, 0.2, p))).astype(int)
        y = (rng.random(n) < expit(intercept_y + effect * t + x @ rng.normal(0.5, 0.2, p))).astype(int)
        if 0 < y.sum() < n and 0 < t.sum() < n:
            return CaseControlData(y, t, x)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)

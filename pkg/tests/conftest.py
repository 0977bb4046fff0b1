import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_params(rng, in_dim=1, hidden=5, out_dim=1, scale=0.8):
    from popmeta.nn import MLPParams

    return MLPParams(
        W1=scale * rng.standard_normal((hidden, in_dim)),
        b1=scale * rng.standard_normal(hidden),
        W2=scale * rng.standard_normal((out_dim, hidden)),
        b2=scale * rng.standard_normal(out_dim),
    )


def random_batch(rng, n, in_dim=1, out_dim=1):
    return rng.uniform(-1.0, 1.0, (n, in_dim)), rng.standard_normal((n, out_dim))

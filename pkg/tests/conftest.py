import numpy as np
import pytest


def max_rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max()) / scale


@pytest.fixture(scope="session")
def toy_binary():
    """Linearly separable, class-imbalanced 2-D binary task."""
    rng = np.random.default_rng(0)
    n = 900
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > -0.55).astype(np.int64)
    X[y == 1] += 1.2
    X[y == 0] -= 1.2
    return (
        (X[:600], y[:600]),
        (X[600:750], y[600:750]),
        (X[750:], y[750:]),
    )

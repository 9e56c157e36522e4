import math

import numpy as np
import pytest

from fedsim.dataset import FederatedDataset


def make_dataset(counts, d=3, c=3, seed=0, hierarchy=None):
    """Random dataset with the given per-device sample counts."""
    rng = np.random.default_rng(seed)
    data = {f"u{i:03d}": (rng.normal(size=(n, d)), rng.integers(0, c, size=n))
            for i, n in enumerate(counts)}
    return FederatedDataset.from_arrays(data, d, c, hierarchy)


def ref_softmax_ce_linear(W, x, y):
    """Mean cross-entropy and its gradient for a linear model, by explicit loops."""
    c, width = W.shape
    grad = np.zeros_like(W)
    total = 0.0
    for xi, yi in zip(x, y):
        xt = list(xi) + [1.0]
        z = [sum(W[j, k] * xt[k] for k in range(width)) for j in range(c)]
        zmax = max(z)
        ez = [math.exp(v - zmax) for v in z]
        s = sum(ez)
        total += math.log(s) + zmax - z[yi]
        for j in range(c):
            coef = ez[j] / s - (1.0 if j == yi else 0.0)
            for k in range(width):
                grad[j, k] += coef * xt[k]
    return total / len(y), grad / len(y)


@pytest.fixture
def small_ds():
    return make_dataset([2, 3, 10])

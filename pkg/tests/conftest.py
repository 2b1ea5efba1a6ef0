import numpy as np
import pytest

from smallarea import backend
from smallarea.model import Dataset


@pytest.fixture(autouse=True, scope="session")
def _default_backend():
    # compiled kernels by default; individual tests switch explicitly
    backend.use("auto")


def synth_dataset(m=10, n_i=6, seed=0, slope=5.0, s2g=3.0, s2e=6.0,
                  split_slopes=False, N=None):
    """Mixed-model draw matching the reference data-generating process."""
    rng = np.random.default_rng(seed)
    n = m * n_i
    x = rng.lognormal(1.0, 0.5, size=n)
    area = np.repeat(np.arange(m), n_i)
    slopes = np.where(np.arange(m) < (m + 1) // 2, slope, -slope) if split_slopes \
        else np.full(m, slope)
    gamma = rng.normal(0.0, np.sqrt(s2g), size=m)
    y = 10.0 + slopes[area] * x + gamma[area] + rng.normal(0.0, np.sqrt(s2e), size=n)
    Npop = np.full(m, N if N is not None else 10 * n_i)
    return Dataset.from_arrays(area, y, x, N=Npop)


@pytest.fixture
def small_ds():
    return synth_dataset(m=8, n_i=6, seed=42)

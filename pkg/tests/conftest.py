import numpy as np
import pytest

from jsmkit.volume import Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


@pytest.fixture
def random_volume(rng):
    def make(dims=(5, 5, 5), lo=0.0, hi=1.0):
        return Volume3D(rng.uniform(lo, hi, size=dims))

    return make


def grid_points(dims):
    return (
        np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
        .astype(np.float64)
    )

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pd(rng, p, extra=2):
    a = rng.standard_normal((p, p * extra))
    return a @ a.T / (p * extra)


@pytest.fixture
def pd_factory(rng):
    def make(p, extra=2):
        return random_pd(rng, p, extra)
    return make

import numpy as np
import pytest
from hypothesis import settings

from latenthrl import _kernels as K

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    with K.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


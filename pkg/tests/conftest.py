import numpy as np
import pytest
from hypothesis import settings

from soslab.disorder import DisorderField, DisorderParams

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def zero_field():
    return DisorderField(DisorderParams.zero(mstar=5.0))


@pytest.fixture
def field10():
    return DisorderField(DisorderParams(mstar=10.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

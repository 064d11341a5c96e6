import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mbv2():
    from hardwire.zoo import mobilenetv2
    return mobilenetv2(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import numpy as np
import pytest

from mmtseg import tensor


@pytest.fixture(autouse=True)
def debug_checks():
    """Run every test with NaN/Inf assertions enabled in the engine."""
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

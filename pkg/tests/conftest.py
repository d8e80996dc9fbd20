import numpy as np
import pytest

from disinr import diffcore as dc


@pytest.fixture(autouse=True)
def _default_precision():
    # every test starts in 32-bit, no debug checks, gradients on
    dc.set_precision(32)
    dc.set_debug(False)
    yield
    dc.set_precision(32)
    dc.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

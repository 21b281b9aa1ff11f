import numpy as np
import pytest

from injecttst.numerics import set_debug_checks


@pytest.fixture(autouse=True, scope="session")
def _finite_output_checks():
    # every forward op asserts finite outputs while the suite runs
    set_debug_checks(True)
    yield
    set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

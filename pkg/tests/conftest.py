import numpy as np
import pytest

from emgmoe.tensor import active_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    """Keep the global tape empty between tests."""
    active_tape().clear()
    yield
    active_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(0)

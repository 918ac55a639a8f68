import numpy as np
import pytest

from services.numeric_core import make_rng


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234, 0)

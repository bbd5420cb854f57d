import numpy as np
import pytest

from urlbert_lab import autodiff


@pytest.fixture
def f64():
    """Run a test at float64 (gradient checks are unreliable at float32)."""
    with autodiff.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

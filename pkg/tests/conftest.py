import numpy as np
import pytest

from lecaps import tensor


@pytest.fixture(autouse=True)
def clean_engine():
    """Every test starts and ends with an empty tape and float32 default."""
    tensor.clear_tape()
    tensor.set_default_dtype(np.float32)
    yield
    tensor.clear_tape()
    tensor.set_default_dtype(np.float32)

import os

# Single-threaded BLAS keeps kernel calls deterministic and makes the
# task-parallel speedup measurements meaningful; must be set before the
# first numpy import.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

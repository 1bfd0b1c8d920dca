import os

# Single-threaded BLAS: the nets' matmuls are small enough that thread
# fan-out only adds contention, and it keeps results machine-independent.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from hedgelab import EnvConfig, GbmSpec, OptionSpec, PathGrid, SabrSpec

ONE_MONTH = 21 / 252


@pytest.fixture
def option_1m():
    return OptionSpec(strike=100.0, expiry=ONE_MONTH)


@pytest.fixture
def gbm():
    return GbmSpec(s0=100.0, mu=0.05, sigma=0.2)


@pytest.fixture
def sabr():
    return SabrSpec(s0=100.0, mu=0.05, sigma0=0.2, vol_of_vol=0.6, rho=-0.4)


@pytest.fixture
def env_config_1m(option_1m, gbm):
    return EnvConfig(
        option=option_1m,
        model=gbm,
        grid=PathGrid(ONE_MONTH, 21),
        kappa=0.01,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

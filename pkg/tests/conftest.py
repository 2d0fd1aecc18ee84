import math

import numpy as np
import pytest

from pmsm_harvest.params import PlantParams
from pmsm_harvest.synthesis import SynthesisConfig, iterate_design


@pytest.fixture(scope="session")
def params():
    return PlantParams()


@pytest.fixture(scope="session")
def linear_params():
    """Lossless screw, no Coulomb friction, unlimited bus."""
    return PlantParams().with_(eta=1.0, f_c=0.0, v_s=math.inf)


@pytest.fixture(scope="session")
def nominal_design(params):
    return iterate_design(params, SynthesisConfig.from_params(params, xdot_m=0.0286))


@pytest.fixture(scope="session")
def ridge_design(params):
    """A design near the best simulated power at sigma_a = 0.1."""
    return iterate_design(params, SynthesisConfig.from_params(params, xdot_m=0.0673))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

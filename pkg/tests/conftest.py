import math
import os

import numpy as np
import pytest

from tlcorrect import nnet
from tlcorrect.dynsys import Domain, make_system
from tlcorrect.fml import TrainConfig, generate_dataset, train_prior

PENDULUM_DOMAIN = Domain((-math.pi, -2 * math.pi), (math.pi, 2 * math.pi))


@pytest.fixture(scope="session")
def pendulum_prior():
    """Oscillator-trained 3x50 net at one fifth of the full data and epochs."""
    lf = generate_dataset(make_system("harmonic-oscillator", {"beta": 9.0}), PENDULUM_DOMAIN, 6000, 0.1, seed=11)
    params, _ = train_prior(lf, nnet.Architecture(2, 3, 50), TrainConfig(epochs=2000, seed=13))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("TLCORRECT_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="full-scale run; set TLCORRECT_NIGHTLY=1")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)

import numpy as np
import pytest

from NAAS.energy import AnnealedPotential, IsotropicGaussian
from NAAS.schedule import NoiseSchedule


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run the long acceptance tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training run, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def quadratic_potential():
    """Standard Gaussian prior annealed to a narrower Gaussian, with analytic HVPs."""
    return AnnealedPotential(
        IsotropicGaussian(2, 1.0), IsotropicGaussian(2, 0.5), hvp_strategy="analytic"
    )


@pytest.fixture
def self_potential():
    """Prior and target coincide, so the annealed potential does not depend on time."""
    return AnnealedPotential(IsotropicGaussian(2, 1.0), IsotropicGaussian(2, 1.0))


@pytest.fixture
def constant_schedule():
    return NoiseSchedule.constant(1.0)

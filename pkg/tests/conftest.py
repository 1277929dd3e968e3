import numpy as np
import pytest

from xbarnet.device import DeviceSpec


@pytest.fixture
def spec():
    return DeviceSpec()


@pytest.fixture
def ideal_spec():
    """No device-to-device variation, no read asymmetry."""
    return DeviceSpec(vset_sigma=0.0, vreset_sigma=0.0,
                      kappa_mean=0.0, kappa_sigma=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

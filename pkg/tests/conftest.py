import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carshape.geometry import Intrinsics
from carshape.synth import SynthConfig, default_car_prior, synth_generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def prior():
    return default_car_prior()


@pytest.fixture(scope="session")
def K500():
    return Intrinsics(500.0, 500.0, 320.0, 240.0)


@pytest.fixture(scope="session")
def clean_set(prior):
    """Twelve noiseless instances of the default car prior."""
    return synth_generate(prior, SynthConfig(instance_count=12, pixel_noise_sigma=0.0, seed=11,
                                             confidence_range=(1.0, 1.0)))


@pytest.fixture(scope="session")
def noisy_set(prior):
    return synth_generate(prior, SynthConfig(instance_count=12, pixel_noise_sigma=2.0,
                                             outlier_fraction=0.2, seed=12))


def rodrigues(axis, angle):
    """Reference axis-angle rotation, written out component-wise."""
    x, y, z = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])

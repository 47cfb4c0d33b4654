import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eeggraph.eeg_io import Recording

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_recording(data, fs=256.0, subject="S01", group="HC", segment=1, channels=None):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    channels = channels or tuple(f"ch{i}" for i in range(data.shape[0]))
    return Recording(subject, group, segment, fs, tuple(channels), data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

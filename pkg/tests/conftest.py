import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    """One noiseless 16^3 phantom with a defect, shared across tests."""
    from decade.phantom import Geometry, PhantomSpec, make_phantom

    spec = PhantomSpec(dims=(16, 16, 16), voxel_mm=6.0, geometry=Geometry(defect_start_deg=30.0), seed=5)
    return make_phantom(spec)


@pytest.fixture(scope="session")
def desk_phantom():
    from decade.phantom import PhantomSpec, make_phantom

    return make_phantom(PhantomSpec(seed=11))

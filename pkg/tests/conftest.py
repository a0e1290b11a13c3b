import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from choir import synthetic

settings.register_profile("choir", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("choir")


@pytest.fixture(scope="session")
def small_corpus():
    """Two classes, eight instances each, 256 points."""
    spec = synthetic.SyntheticCorpus(classes=["plane", "chair"], instances_per_class=8, n_points=256, seed=3)
    return synthetic.generate_synthetic_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

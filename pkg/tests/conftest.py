import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seasonal_ml.grids import GridSpec, GridStack

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_stack(rng, n_years=12, n_lat=4, n_lon=5, kind="total", first_year=1990, mask=None, scale=100.0):
    spec = GridSpec(0.25, 30.25, 0.5, n_lat, n_lon, mask)
    values = rng.gamma(2.0, scale / 2, size=(n_years, n_lat, n_lon))
    return GridStack(spec, np.arange(first_year, first_year + n_years), values, kind)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

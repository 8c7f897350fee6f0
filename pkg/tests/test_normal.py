import mpmath
import numpy as np
import pytest

from seasonal_ml.normal import norm_cdf, norm_ppf, norm_sf

# published high-precision values of the standard normal quantile
TABLE = {
    0.01: -2.3263478740408408,
    1 / 3: -0.43072729929545756,
    0.5: 0.0,
    0.975: 1.959963984540054,
}


@pytest.mark.parametrize("p, q", TABLE.items())
def test_quantile_matches_reference_table(p, q):
    assert abs(norm_ppf(p) - q) <= 1e-10


def test_quantile_matches_mpmath_on_grid():
    mpmath.mp.dps = 40
    ps = np.concatenate([[1e-6, 1e-5, 1e-3], np.linspace(0.01, 0.99, 99), [1 - 1e-3, 1 - 1e-5, 1 - 1e-6]])
    for p in ps:
        exact = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(float(p)) - 1))
        assert abs(norm_ppf(p) - exact) <= 1e-10


def test_cdf_inverts_quantile():
    ps = np.linspace(1e-6, 1 - 1e-6, 2001)
    assert np.max(np.abs(norm_cdf(norm_ppf(ps)) - ps)) <= 1e-9


def test_cdf_matches_mpmath():
    mpmath.mp.dps = 40
    for x in np.linspace(-8, 8, 161):
        exact = float(mpmath.ncdf(float(x)))
        assert abs(norm_cdf(x) - exact) <= 1e-12
        assert abs(norm_sf(x) - (1 - exact)) <= 1e-12


def test_scaled_quantile():
    assert norm_ppf(0.975, scale=2.0) == pytest.approx(2 * TABLE[0.975], abs=1e-12)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_stack
from seasonal_ml.eof import compute_eofs, project_loadings, reconstruct, write_basis
from seasonal_ml.errors import ConfigurationError, ProjectionError, ValidationError
from seasonal_ml.gauss_transform import fit_transform_model, transform
from seasonal_ml.grids import GridSpec, GridStack, compute_anomalies


def transformed_stack(seed, n_years=8, n_lat=2, n_lon=5):
    rng = np.random.default_rng(seed)
    s = random_stack(rng, n_years=n_years, n_lat=n_lat, n_lon=n_lon)
    a = compute_anomalies(s, s.years)
    return transform(fit_transform_model(a, a.years), a)


def test_rank_one_identity():
    c = np.array([1.0, -2.0, 0.5, 3.0, -2.5])
    u = np.array([1.0, 1.0]) / np.sqrt(2)
    spec = GridSpec(0, 0, 1.0, 1, 2)
    z = GridStack(spec, np.arange(5), (c[:, None] * u).reshape(5, 1, 2), "transformed")
    b = compute_eofs(z, z.years, 1)
    assert np.allclose(b.patterns[0], u, atol=1e-12)
    # c has zero mean, so the sign convention keeps the orientation of u
    assert np.allclose(b.loadings[:, 0], c, atol=1e-12)
    assert np.allclose(b.resid_sq, 0, atol=1e-12)
    assert b.loading_variances[0] == pytest.approx((c**2).sum() / 4, rel=1e-12)


def test_full_rank_leaves_no_residual():
    z = transformed_stack(0, n_years=8, n_lat=3, n_lon=4)
    b = compute_eofs(z, z.years, 7)
    assert np.allclose(b.resid_sq, 0, atol=1e-6)


def test_matches_dense_eigendecomposition():
    z = transformed_stack(1)
    b = compute_eofs(z, z.years, 5)
    zm = z.values.reshape(8, -1)
    cov = np.cov(zm, rowvar=False, ddof=1)
    w, v = np.linalg.eigh(cov)
    w, v = w[::-1], v[:, ::-1]
    assert np.allclose(b.loading_variances, w[:5], rtol=1e-6, atol=1e-9)
    for i in range(5):
        assert min(np.abs(b.patterns[i] - v[:, i]).max(), np.abs(b.patterns[i] + v[:, i]).max()) < 1e-6


@given(st.integers(0, 100_000), st.integers(1, 6))
def test_basis_invariants(seed, k):
    z = transformed_stack(seed, n_years=9, n_lat=3, n_lon=3)
    b = compute_eofs(z, z.years, k)
    assert np.allclose(b.patterns @ b.patterns.T, np.eye(k), atol=1e-9)
    assert np.all(np.diff(b.loading_variances) <= 1e-12)
    assert np.all(b.loading_variances >= 0)
    assert np.all(np.abs(b.loadings.sum(axis=0)) <= 1e-9 * (1 + np.abs(b.loadings).sum(axis=0)))
    assert np.all(b.resid_sq >= 0)
    for i in range(k):
        lead = np.argmax(np.abs(b.patterns[i]))
        assert b.patterns[i, lead] > 0
    # projection of the fit years reproduces the stored loadings exactly
    for t in range(len(z.years)):
        assert np.array_equal(project_loadings(b, z.values[t]), b.loadings[t])
    # variance bookkeeping
    n = len(z.years)
    err = np.mean([np.nansum((z.values[t] - reconstruct(b, b.loadings[t])) ** 2) for t in range(n)])
    assert err == pytest.approx(b.resid_sq.sum() * (n - 1) / n, rel=1e-6, abs=1e-12)


def test_deterministic():
    z = transformed_stack(5)
    a, b = compute_eofs(z, z.years, 4), compute_eofs(z, z.years, 4)
    assert np.array_equal(a.patterns, b.patterns)


def test_projection_examples():
    z = transformed_stack(2)
    b = compute_eofs(z, z.years, 3)
    assert np.allclose(project_loadings(b, b.pattern_field(0)), [1, 0, 0], atol=1e-12)
    assert np.array_equal(project_loadings(b, np.zeros(z.spec.shape)), np.zeros(3))
    rng = np.random.default_rng(0)
    f = rng.standard_normal(z.spec.shape)
    brute = [sum(b.pattern_field(i)[p, q] * f[p, q] for p in range(2) for q in range(5)) for i in range(3)]
    assert np.allclose(project_loadings(b, f), brute, atol=1e-12)
    bad = f.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ProjectionError):
        project_loadings(b, bad)


def test_reconstruct_examples():
    z = transformed_stack(3)
    b = compute_eofs(z, z.years, 3)
    assert np.allclose(reconstruct(b, [1.0, 0, 0]), b.pattern_field(0))
    assert np.array_equal(reconstruct(b, np.zeros(3)), np.zeros(z.spec.shape))
    with pytest.raises(ValidationError):
        reconstruct(b, [1.0, 2.0])
    f = z.values[4]
    a = project_loadings(b, f)
    err = ((f - reconstruct(b, a)) ** 2).sum()
    assert err == pytest.approx((f**2).sum() - (a**2).sum(), rel=1e-9)


def test_zero_input_and_errors():
    spec = GridSpec(0, 0, 1.0, 2, 2)
    z = GridStack(spec, np.arange(6), np.zeros((6, 2, 2)), "transformed")
    b = compute_eofs(z, z.years, 2)
    assert np.array_equal(b.loading_variances, [0.0, 0.0])
    assert np.array_equal(b.resid_sq, np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        compute_eofs(z, z.years, 5)
    with pytest.raises(ConfigurationError):
        compute_eofs(GridStack(spec, z.years, z.values, "anomaly"), z.years, 1)


def test_write_basis(tmp_path):
    z = transformed_stack(4)
    b = compute_eofs(z, z.years, 2)
    write_basis(b, tmp_path)
    heads = {p.name: p.read_text().splitlines()[0] for p in tmp_path.iterdir()}
    assert heads["eof_patterns.csv"] == "lat,lon,eof_index,value"
    assert heads["eof_variances.csv"] == "eof_index,loading_variance"
    assert heads["eof_cells.csv"] == "lat,lon,sigma_sq,resid_sq"
    assert heads["eof_loadings.csv"] == "year,eof_index,value"
    assert len((tmp_path / "eof_patterns.csv").read_text().splitlines()) == 1 + 2 * 10

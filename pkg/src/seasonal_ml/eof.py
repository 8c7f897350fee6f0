"""Empirical orthogonal functions of transformed precipitation fields.

The year x cell matrix of transformed anomalies is decomposed by SVD.
Fields are not re-centred: the Gaussianizing transform already gives them
zero mean over the reference years. Everything here uses the ``n - 1``
variance denominator, matching the transform's scale.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ProjectionError, ValidationError
from .grids import GridSpec, GridStack

DEFAULT_K = 7
DEGENERACY_GAP = 1e-10


@dataclass
class EofBasis:
    spec: GridSpec
    support: np.ndarray  # cells entering the decomposition
    patterns: np.ndarray  # (k, n_support) unit vectors
    loading_variances: np.ndarray  # (k,)
    loadings: np.ndarray  # (n_fit, k)
    sigma_sq: np.ndarray  # (n_lat, n_lon) variance of z over fit years
    resid_sq: np.ndarray  # (n_lat, n_lon) residual variance
    sigma: np.ndarray  # (n_lat, n_lon) climatological scale used for tercile bounds
    fit_years: np.ndarray

    @property
    def k(self):
        return self.patterns.shape[0]

    def pattern_field(self, i):
        out = np.full(self.spec.shape, np.nan)
        out[self.support] = self.patterns[i]
        return out


def _order_components(s, vt):
    """Descending singular values; near-ties ordered by the first
    differing pattern component (larger first)."""

    def cmp(i, j):
        gap = abs(s[i] - s[j])
        scale = max(abs(s[i]), abs(s[j]), np.finfo(float).tiny)
        if gap > DEGENERACY_GAP * scale:
            return -1 if s[i] > s[j] else 1
        diff = np.flatnonzero(vt[i] != vt[j])
        if diff.size == 0:
            return 0
        return -1 if vt[i, diff[0]] > vt[j, diff[0]] else 1

    return sorted(range(len(s)), key=functools.cmp_to_key(cmp))


def compute_eofs(z: GridStack, fit_years, k=DEFAULT_K, sigma=None) -> EofBasis:
    """Leading ``k`` EOFs of ``z`` over ``fit_years``.

    ``sigma`` is the per-cell scale of the climatological distribution
    (the transform's reference standard deviation); it defaults to
    ``sqrt(sigma_sq)``.
    """
    if z.kind != "transformed":
        raise ConfigurationError(f"EOFs need a transformed stack, got {z.kind}")
    fit_years = np.array(sorted(set(int(y) for y in fit_years)), dtype=np.int64)
    n = len(fit_years)
    fields = z.values[z.year_index(fit_years)]
    support = z.spec.valid_mask & np.isfinite(fields).all(axis=0)
    m = int(support.sum())
    if k < 1 or k > min(n - 1, m):
        raise ConfigurationError(f"k={k} exceeds min(years - 1, cells) = {min(n - 1, m)}")
    zm = fields[:, support]

    _, s, vt = np.linalg.svd(zm, full_matrices=False)
    for i in range(vt.shape[0]):
        lead = int(np.argmax(np.abs(vt[i])))
        if vt[i, lead] < 0:
            vt[i] = -vt[i]
    order = _order_components(s, vt)[:k]
    patterns = np.ascontiguousarray(vt[order])

    # same reduction as project_loadings so re-projection is bit-exact
    loadings = np.array([_dot_rows(patterns, row) for row in zm]).reshape(n, k)
    lam = (loadings**2).sum(axis=0) / (n - 1)

    sigma_sq = np.full(z.spec.shape, np.nan)
    sigma_sq[support] = (zm**2).sum(axis=0) / (n - 1)
    explained = (patterns**2 * lam[:, None]).sum(axis=0)
    resid_sq = np.full(z.spec.shape, np.nan)
    resid_sq[support] = np.maximum(0.0, sigma_sq[support] - explained)

    if sigma is None:
        sigma = np.sqrt(sigma_sq)
    sigma = np.where(support, sigma, np.nan)
    return EofBasis(z.spec, support, patterns, lam, loadings, sigma_sq, resid_sq, sigma, fit_years)


def _dot_rows(patterns, values):
    # elementwise product then numpy's pairwise sum: independent of BLAS
    # kernel choice and memory alignment
    return (patterns * values[None, :]).sum(axis=1)


def project_loadings(basis: EofBasis, z_field):
    values = np.asarray(z_field, dtype=float)[basis.support]
    if not np.all(np.isfinite(values)):
        raise ProjectionError("field has missing values on the EOF support")
    return _dot_rows(basis.patterns, values)


def reconstruct(basis: EofBasis, loadings):
    loadings = np.asarray(loadings, dtype=float)
    if loadings.shape != (basis.k,):
        raise ValidationError(f"expected {basis.k} loadings, got shape {loadings.shape}")
    out = np.full(basis.spec.shape, np.nan)
    out[basis.support] = loadings @ basis.patterns
    return out


def write_basis(basis: EofBasis, directory):
    """Persist patterns, variances, per-cell variances and loadings as CSV."""
    directory = Path(directory)
    spec = basis.spec
    cells = [(i, j) for i, j in zip(*np.nonzero(basis.support))]
    with open(directory / "eof_patterns.csv", "w", encoding="utf-8") as fh:
        fh.write("lat,lon,eof_index,value\n")
        for e in range(basis.k):
            for c, (i, j) in enumerate(cells):
                fh.write(f"{float(spec.lats[i])!r},{float(spec.lons[j])!r},{e + 1},{float(basis.patterns[e, c])!r}\n")
    with open(directory / "eof_variances.csv", "w", encoding="utf-8") as fh:
        fh.write("eof_index,loading_variance\n")
        for e, lam in enumerate(basis.loading_variances):
            fh.write(f"{e + 1},{float(lam)!r}\n")
    with open(directory / "eof_cells.csv", "w", encoding="utf-8") as fh:
        fh.write("lat,lon,sigma_sq,resid_sq\n")
        for i, j in cells:
            fh.write(
                f"{float(spec.lats[i])!r},{float(spec.lons[j])!r},"
                f"{float(basis.sigma_sq[i, j])!r},{float(basis.resid_sq[i, j])!r}\n"
            )
    with open(directory / "eof_loadings.csv", "w", encoding="utf-8") as fh:
        fh.write("year,eof_index,value\n")
        for t, year in enumerate(basis.fit_years):
            for e in range(basis.k):
                fh.write(f"{int(year)},{e + 1},{float(basis.loadings[t, e])!r}\n")

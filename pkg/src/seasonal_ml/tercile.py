"""Tercile probability fields from Gaussian loading forecasts, ensembles
and climatology, plus the regional expected-tercile summary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eof import EofBasis
from .errors import ConfigurationError, DomainError, NumericalError, ValidationError
from .grids import CategoryStack, GridSpec, Mask, tercile_order_stats
from .normal import norm_cdf, norm_ppf, norm_sf

PROVENANCES = ("model", "ensemble", "climatology")
Q_LOWER = float(norm_ppf(1 / 3))
Q_UPPER = -Q_LOWER  # exact antisymmetry, as in the transform


@dataclass
class LoadingForecast:
    year: int
    mean: np.ndarray  # (k,)
    cov: np.ndarray  # (k, k)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        k = self.mean.shape[0]
        if self.cov.shape != (k, k):
            raise ConfigurationError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.cov).max())):
            raise ValidationError("loading covariance must be symmetric")


@dataclass
class TercileField:
    spec: GridSpec
    year: int
    probs: np.ndarray  # (3, n_lat, n_lon): below, normal, above; NaN = missing
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"unknown provenance {self.provenance!r}")

    @property
    def p_below(self):
        return self.probs[0]

    @property
    def p_normal(self):
        return self.probs[1]

    @property
    def p_above(self):
        return self.probs[2]

    @property
    def available(self):
        return np.isfinite(self.probs).all(axis=0)


def _simplex(p_b, p_a):
    """Complete (p_b, p_a) with p_n = 1 - p_b - p_a, clamped at 0 and
    renormalized."""
    p_n = 1.0 - p_b - p_a
    neg = p_n < 0
    if np.any(neg):
        total = p_b + p_a
        p_b = np.where(neg, p_b / total, p_b)
        p_a = np.where(neg, p_a / total, p_a)
        p_n = np.where(neg, 0.0, p_n)
    # p_n absorbs rounding so the triple sums to one
    p_n = 1.0 - p_b - p_a
    return np.stack([p_b, np.maximum(p_n, 0.0), p_a])


def tercile_from_gaussian(forecast: LoadingForecast, basis: EofBasis) -> TercileField:
    """Probabilities that ``z ~ N(sum mu_i zeta_i, zeta' S zeta + resid)``
    falls below ``sigma Q(1/3)`` / above ``sigma Q(2/3)`` at every cell."""
    if forecast.mean.shape[0] != basis.k:
        raise ConfigurationError(f"forecast has {forecast.mean.shape[0]} loadings, basis has {basis.k}")
    zeta = basis.patterns  # (k, m)
    m = forecast.mean @ zeta
    v = np.einsum("is,ij,js->s", zeta, forecast.cov, zeta) + basis.resid_sq[basis.support]
    if np.any(v < -1e-12):
        raise NumericalError(f"negative predictive variance {v.min():.3e}")
    v = np.maximum(v, 0.0)
    sigma = basis.sigma[basis.support]
    lo, hi = sigma * Q_LOWER, sigma * Q_UPPER

    sd = np.sqrt(v)
    pos = sd > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        p_b = np.where(pos, norm_cdf((lo - m) / sd), (m <= lo).astype(float))
        p_a = np.where(pos, norm_sf((hi - m) / sd), (m > hi).astype(float))
    tri = _simplex(p_b, p_a)
    tri[:, (v == 0) & (sigma == 0)] = np.nan
    tri[:, ~np.isfinite(sigma)] = np.nan

    probs = np.full((3, *basis.spec.shape), np.nan)
    probs[:, basis.support] = tri
    return TercileField(basis.spec, forecast.year, probs, "model")


def tercile_from_ensemble(members, ref_years, target_year, exclude_target=True) -> TercileField:
    """Member fractions in each tercile of the pooled model climatology.

    ``members`` is a list of GridStacks, one per member, on the same years
    and grid. Boundaries are order statistics of all members over
    ``ref_years`` (minus ``target_year`` when excluded).
    """
    stacks = list(members)
    if not stacks:
        raise ValidationError("no ensemble members")
    spec, years = stacks[0].spec, stacks[0].years
    for s in stacks[1:]:
        if not np.array_equal(s.years, years) or s.values.shape != stacks[0].values.shape:
            raise ValidationError("ensemble members have ragged years or grids")
    values = np.stack([s.values for s in stacks])  # (M, T, lat, lon)
    ref = sorted(set(int(y) for y in ref_years))
    if exclude_target:
        ref = [y for y in ref if y != int(target_year)]
    pos = {int(y): i for i, y in enumerate(years)}
    if int(target_year) not in pos:
        raise ValidationError(f"target year {target_year} not in ensemble")
    pooled = values[:, [pos[y] for y in ref]].reshape(-1, *spec.shape)
    n = pooled.shape[0]
    a, b = tercile_order_stats(n)
    srt = np.sort(pooled, axis=0)
    lo, hi = srt[a - 1], srt[b - 1]

    target = values[:, pos[int(target_year)]]
    n_mem = target.shape[0]
    below = (target <= lo).sum(axis=0)
    above = ((target >= hi) & ~(target <= lo)).sum(axis=0)
    # each entry is its own count fraction; their sum is 1 to rounding
    probs = np.stack([below / n_mem, (n_mem - below - above) / n_mem, above / n_mem])
    bad = np.isnan(pooled).any(axis=0) | np.isnan(target).any(axis=0) | ~spec.valid_mask
    probs[:, bad] = np.nan
    return TercileField(spec, int(target_year), probs, "ensemble")


def climatology_forecast(mask: Mask, year) -> TercileField:
    probs = np.full((3, *mask.spec.shape), np.nan)
    probs[:, mask.included] = 1.0 / 3.0
    return TercileField(mask.spec, int(year), probs, "climatology")


def expected_tercile(field, mask: Mask, year=None):
    """Regional mean of ``p_a - p_b`` (forecast) or of the category
    values (observations), over included non-missing cells."""
    if isinstance(field, TercileField):
        values = field.p_above - field.p_below
    elif isinstance(field, CategoryStack):
        values = field.field(year) if year is not None else field.categories[0]
    else:
        values = np.asarray(field, dtype=float)
    sel = mask.included & np.isfinite(values)
    if not sel.any():
        raise DomainError("no included, non-missing cells")
    return float(values[sel].mean())


def write_terciles(fields, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lat,lon,year,p_below,p_normal,p_above,provenance\n")
        for f in fields:
            spec = f.spec
            for i, j in zip(*np.nonzero(spec.valid_mask)):
                p = f.probs[:, i, j]
                cols = ",".join("NA" if not np.isfinite(x) else repr(float(x)) for x in p)
                fh.write(f"{float(spec.lats[i])!r},{float(spec.lons[j])!r},{int(f.year)},{cols},{f.provenance}\n")


def load_terciles(path, spec: GridSpec):
    """Read a tercile CSV back into one TercileField per year."""
    import csv

    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            year = int(row["year"])
            if year not in out:
                out[year] = [np.full((3, *spec.shape), np.nan), row["provenance"].strip()]
            i, j = spec.cell_index(float(row["lat"]), float(row["lon"]))
            for c, key in enumerate(("p_below", "p_normal", "p_above")):
                v = row[key].strip()
                out[year][0][c, i, j] = np.nan if v == "NA" else float(v)
    return [TercileField(spec, y, p, prov) for y, (p, prov) in sorted(out.items())]


def write_pgm(field: TercileField, channel, path):
    """One probability channel as an 8-bit binary PGM (north up)."""
    idx = {"below": 0, "normal": 1, "above": 2}[channel]
    data = field.probs[idx][::-1]
    img = np.where(np.isfinite(data), np.round(np.clip(data, 0, 1) * 255), 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())

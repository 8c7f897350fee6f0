"""Multicategory Brier scores, skill maps, masked aggregation and bootstrap
uncertainty of mean scores.

The climatological forecast (1/3, 1/3, 1/3) scores 2/3 on every outcome,
so every skill score here is ``1 - 1.5 * mean model score``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .grids import CategoryStack, Mask

CLIM_SCORE = 2.0 / 3.0
SIMPLEX_TOL = 1e-9
PERCENTILES = (5.0, 25.0, 50.0, 75.0, 95.0)
# documented stream: PCG64 seeded from SeedSequence(seed).spawn(n)[i]
PRNG_STREAM = "numpy PCG64; resample i uses SeedSequence(seed).spawn(n)[i]; integers(0, n_years, n_years)"


def _check_simplex(p):
    p = np.asarray(p, dtype=float)
    ok = np.all((p >= -SIMPLEX_TOL) & (p <= 1 + SIMPLEX_TOL), axis=0)
    ok &= np.abs(p.sum(axis=0) - 1.0) <= SIMPLEX_TOL
    finite = np.isfinite(p).all(axis=0)
    if np.any(finite & ~ok):
        raise ValidationError("probability triple is not on the simplex")
    return p


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _brier_sum(p, ind):
    """Correctly rounded ``((p - ind)**2).sum(axis=0)`` via double-double
    arithmetic, so scores such as the climatological 2/3 come out exact."""
    hi = np.zeros(p.shape[1:])
    lo = np.zeros(p.shape[1:])
    for i in range(p.shape[0]):
        x, e = _two_sum(p[i], -ind[i])
        sq = x * x
        xh, xl = _split(x)
        sq_err = ((xh * xh - sq) + 2 * xh * xl) + xl * xl
        hi, err = _two_sum(hi, sq)
        lo = lo + err + sq_err + 2 * x * e + e * e
    return hi + lo


def mbs(probs, category):
    """Sum of squared differences between ``(p_b, p_n, p_a)`` and the
    outcome indicator. Works elementwise over trailing axes; missing
    triples or categories give NaN."""
    p = _check_simplex(probs)
    cat = np.asarray(category, dtype=float)
    valid = np.isnan(cat) | np.isin(cat, (-1.0, 0.0, 1.0))
    if not np.all(valid):
        raise ValidationError("category must be -1, 0 or 1")
    ind = np.stack([cat == -1, cat == 0, cat == 1]).astype(float)
    score = _brier_sum(p, ind)
    score = np.where(np.isnan(cat), np.nan, score)
    return float(score) if np.ndim(score) == 0 else score


def _score_cube(forecasts, observed: CategoryStack, mask: Mask):
    """Per (year, cell) MBS over common years; excluded cells are NaN."""
    fc = {int(f.year): f for f in forecasts}
    years = [int(y) for y in observed.years if int(y) in fc]
    if not years:
        raise DomainError("forecasts and observations share no years")
    cube = np.empty((len(years), *mask.spec.shape))
    for t, year in enumerate(years):
        s = mbs(fc[year].probs, observed.field(year))
        cube[t] = np.where(mask.included, s, np.nan)
    return np.array(years, dtype=np.int64), cube


def mbss_map(forecasts, observed: CategoryStack, mask: Mask):
    _, cube = _score_cube(forecasts, observed, mask)
    with np.errstate(invalid="ignore"):
        counts = np.isfinite(cube).sum(axis=0)
        mean = np.where(counts > 0, np.nansum(cube, axis=0) / np.maximum(counts, 1), np.nan)
    return 1.0 - mean / CLIM_SCORE


@dataclass
class ScoreReport:
    years: np.ndarray
    cell_mbs: np.ndarray  # mean MBS per cell
    cell_mbss: np.ndarray
    year_mbs_model: np.ndarray
    year_mbs_clim: np.ndarray
    mbss: float
    mask_id: str = "mask"

    def write(self, directory, spec):
        directory = Path(directory)
        with open(directory / "scores_map.csv", "w", encoding="utf-8") as fh:
            fh.write("lat,lon,mbss\n")
            for i, j in zip(*np.nonzero(spec.valid_mask)):
                v = self.cell_mbss[i, j]
                val = "NA" if not np.isfinite(v) else repr(float(v))
                fh.write(f"{float(spec.lats[i])!r},{float(spec.lons[j])!r},{val}\n")
        with open(directory / "scores_yearly.csv", "w", encoding="utf-8") as fh:
            fh.write("year,mean_mbs_model,mean_mbs_clim\n")
            for y, m, c in zip(self.years, self.year_mbs_model, self.year_mbs_clim):
                fh.write(f"{int(y)},{float(m)!r},{float(c)!r}\n")


def aggregate_scores(forecasts, observed: CategoryStack, mask: Mask, mask_id="mask") -> ScoreReport:
    if not mask.included.any():
        raise DomainError("mask includes no cells")
    years, cube = _score_cube(forecasts, observed, mask)
    flat = cube.reshape(len(years), -1)
    if not np.isfinite(flat).any(axis=1).all():
        raise DomainError("a year has no scored cells under the mask")
    year_model = np.nanmean(flat, axis=1)
    year_clim = np.full(len(years), CLIM_SCORE)
    with np.errstate(invalid="ignore"):
        counts = np.isfinite(cube).sum(axis=0)
        cell_mbs = np.where(counts > 0, np.nansum(cube, axis=0) / np.maximum(counts, 1), np.nan)
    cell_mbss = 1.0 - cell_mbs / CLIM_SCORE
    agg = 1.0 - year_model.mean() / year_clim.mean()
    return ScoreReport(years, cell_mbs, cell_mbss, year_model, year_clim, float(agg), mask_id)


@dataclass
class BootstrapSummary:
    n_resamples: int
    seed: int
    means: np.ndarray  # resampled mean model scores
    percentiles: dict = field(default_factory=dict)  # level -> mean score
    mbss_percentiles: dict = field(default_factory=dict)  # level -> skill
    stream: str = PRNG_STREAM

    @property
    def mbss(self):
        return 1.0 - self.means / CLIM_SCORE

    def write(self, directory):
        directory = Path(directory)
        with open(directory / "bootstrap.csv", "w", encoding="utf-8") as fh:
            fh.write("resample_index,mean_score\n")
            for i, m in enumerate(self.means):
                fh.write(f"{i},{float(m)!r}\n")
        lines = [f"n_resamples={self.n_resamples}", f"seed={self.seed}", f"stream={self.stream}"]
        for q, v in self.percentiles.items():
            lines.append(f"mean_mbs_p{q:g}={float(v)!r}")
        for q, v in self.mbss_percentiles.items():
            lines.append(f"mbss_p{q:g}={float(v)!r}")
        (directory / "bootstrap_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def resample_indices(n_years, n_resamples, seed):
    """Index matrix ``(n_resamples, n_years)``, one PCG64 substream per row."""
    children = np.random.SeedSequence(int(seed)).spawn(int(n_resamples))
    return np.stack(
        [np.random.Generator(np.random.PCG64(c)).integers(0, n_years, size=n_years) for c in children]
    )


def bootstrap_scores(per_year_means, n_resamples=1000, seed=0) -> BootstrapSummary:
    x = np.asarray(per_year_means, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("bootstrap needs at least two yearly values")
    idx = resample_indices(x.size, n_resamples, seed)
    means = x[idx].mean(axis=1)
    pct = {q: float(v) for q, v in zip(PERCENTILES, np.percentile(means, PERCENTILES, method="linear"))}
    skill = 1.0 - means / CLIM_SCORE
    spct = {q: float(v) for q, v in zip(PERCENTILES, np.percentile(skill, PERCENTILES, method="linear"))}
    return BootstrapSummary(int(n_resamples), int(seed), means, pct, spct)

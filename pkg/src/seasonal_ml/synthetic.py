"""Synthetic datasets with a planted index -> loading -> precipitation chain.

Predictor fields carry a few latent modes (an equatorial Pacific bump, an
Indian Ocean dipole, a low-level wind bump, ...) plus white noise. The
registry indices are computed from those fields, the planted loadings are
linear in a chosen subset of them plus noise at a fixed signal-to-noise
ratio, and the transformed precipitation field is the planted pattern
expansion plus cell noise. Precipitation totals are a positive monotone
function of that field, so ranks (and therefore the Gaussianizing
transform) see exactly the planted structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .features import compute_indices, load_registry
from .grids import SEASONS, GridSpec, GridStack, MonthlyStack

# (variable, centre lat, centre lon, lat width, lon width, sign) pieces per mode
_MODES = {
    "enso": [("sst", 0.0, 215.0, 8.0, 40.0, 1.0)],
    # regional parts keep the Pacific boxes correlated but not collinear
    "enso_east": [("sst", -2.0, 255.0, 6.0, 18.0, 0.7)],
    "enso_west": [("sst", 0.0, 175.0, 6.0, 15.0, 0.7)],
    "iod": [("sst", 0.0, 60.0, 10.0, 12.0, 1.0), ("sst", -5.0, 100.0, 8.0, 12.0, -1.0)],
    "wpac": [("sst", 5.0, 140.0, 12.0, 20.0, 1.0)],
    "npac": [("sst", 27.0, 185.0, 8.0, 25.0, 1.0)],
    "spac": [("sst", -22.0, 180.0, 8.0, 25.0, 1.0)],
    "ueq850": [("u850", 0.0, 75.0, 6.0, 20.0, 1.0)],
    "ueq200": [("u200", 0.0, 75.0, 6.0, 20.0, 1.0)],
}
_CLIM = {"sst": 26.0, "u850": -2.0, "u200": 8.0}


@dataclass(frozen=True)
class SyntheticSpec:
    n_lat: int = 20
    n_lon: int = 20
    lat_start: float = -4.75
    lon_start: float = 33.25
    cell_size: float = 0.5
    years: tuple = tuple(range(1993, 2021))
    season: str = "ond"
    predictor_month: int = 7
    k_star: int = 3
    # per-cell rms contribution of each planted pattern
    amplitudes: tuple = (1.0, 0.7, 0.5)
    # planted loading i <- sum of coef * index
    planted: tuple = ((("n34", 1.0),), (("dmi", 1.0),), (("ueq850", 1.0),))
    snr: float = 3.0
    signal: bool = True
    noise_scale: float = 0.3
    field_noise: float = 0.3
    gamma: float = 0.5
    # smallest possible total as a fraction of the driest base value
    floor: float = 0.5
    n_members: int = 0
    member_bias: float = 1.3
    predictor_cell: float = 5.0

    def __post_init__(self):
        if self.k_star < 1 or self.k_star > self.n_lat * self.n_lon:
            raise ValidationError("k_star out of range")
        if len(self.amplitudes) != self.k_star or len(self.planted) != self.k_star:
            raise ValidationError("amplitudes and planted terms need one entry per pattern")
        if self.noise_scale < 0 or self.field_noise < 0 or self.snr <= 0:
            raise ValidationError("noise scales must be non-negative and snr positive")
        if self.season not in SEASONS or self.predictor_month in SEASONS[self.season]:
            raise ValidationError("predictor month must precede the season")
        if not 0.0 < self.floor < 1.0:
            raise ValidationError("floor must lie in (0, 1)")
        if len(self.years) < 6:
            raise ValidationError("need at least 6 years")


@dataclass
class SyntheticTruth:
    patterns: np.ndarray  # (k_star, n_cells) orthonormal
    loadings: np.ndarray  # (n_years, k_star)
    signal: np.ndarray  # (n_years, k_star) index-driven part of the loadings
    z: GridStack  # planted transformed field before the monotone map
    base: np.ndarray  # (n_lat, n_lon) median seasonal total
    indices: dict  # handle -> per-year values at the predictor month
    planted: tuple
    coefficients: dict = field(default_factory=dict)  # (handle, eof) -> coefficient on the standardized signal


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    totals: GridStack
    monthly_precip: MonthlyStack
    fields: dict  # variable -> MonthlyStack
    members: list  # GridStack per ensemble member
    truth: SyntheticTruth


def smooth_patterns(n_lat, n_lon, k):
    """Orthonormal low-order cosine patterns with the largest-magnitude
    entry positive."""
    y = (np.arange(n_lat) + 0.5) / n_lat
    x = (np.arange(n_lon) + 0.5) / n_lon
    orders = sorted(((a, b) for a in range(6) for b in range(6) if a + b > 0), key=lambda ab: (ab[0] + ab[1], ab))
    cols = []
    for a, b in orders[:k]:
        cols.append((np.cos(np.pi * a * y)[:, None] * np.cos(np.pi * b * x)[None, :]).ravel())
    q, _ = np.linalg.qr(np.column_stack(cols))
    q = q.T
    for i in range(k):
        if q[i, np.argmax(np.abs(q[i]))] < 0:
            q[i] = -q[i]
    return q


def predictor_grid(cell=5.0):
    lat0 = -37.5
    n_lat = int(round(75.0 / cell)) + 1
    return GridSpec(lat0, cell / 2, cell, n_lat, int(round(360.0 / cell)))


def _mode_maps(spec: GridSpec):
    lats, lons = spec.lats[:, None], spec.lons[None, :]
    maps = {}
    for name, pieces in _MODES.items():
        per_var = {}
        for var, clat, clon, wlat, wlon, sign in pieces:
            dlon = (lons - clon + 180.0) % 360.0 - 180.0
            bump = sign * np.exp(-0.5 * (((lats - clat) / wlat) ** 2 + (dlon / wlon) ** 2))
            per_var[var] = per_var.get(var, 0.0) + bump
        maps[name] = per_var
    return maps


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed=0, registry=None) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    years = np.array(sorted(spec.years), dtype=np.int64)
    n_years = len(years)

    # predictor fields, one prior year included for lagged months
    pspec = predictor_grid(spec.predictor_cell)
    p_years = np.arange(years[0] - 1, years[-1] + 1)
    keys = [(int(y), m) for y in p_years for m in range(1, 13)]
    maps = _mode_maps(pspec)
    latent = {name: rng.standard_normal(len(keys)) for name in _MODES}
    season_cycle = np.cos(2 * np.pi * (np.array([m for _, m in keys]) - 1) / 12)
    fields = {}
    for var, clim in _CLIM.items():
        vals = clim + 0.5 * season_cycle[:, None, None] + spec.field_noise * rng.standard_normal((len(keys), *pspec.shape))
        for name, per_var in maps.items():
            if var in per_var:
                vals = vals + latent[name][:, None, None] * per_var[var][None]
        fields[var] = MonthlyStack(pspec, [k[0] for k in keys], [k[1] for k in keys], vals)

    registry = load_registry() if registry is None else registry
    series = compute_indices(fields, registry, years)
    pred_year = years - (1 if spec.predictor_month >= SEASONS[spec.season][0] else 0)
    indices = {h: s.at_month(spec.predictor_month, pred_year) for h, s in series.items()}

    # planted loadings
    m_cells = spec.n_lat * spec.n_lon
    patterns = smooth_patterns(spec.n_lat, spec.n_lon, spec.k_star)
    signal = np.zeros((n_years, spec.k_star))
    coefficients = {}
    noise = rng.standard_normal((n_years, spec.k_star))
    for i, terms in enumerate(spec.planted):
        s = np.zeros(n_years)
        for handle, coef in terms:
            if handle not in indices:
                raise ValidationError(f"planted index {handle!r} not in the registry")
            s = s + coef * indices[handle]
        sd = s.std(ddof=1)
        if sd > 0:
            s = s / sd
        for handle, coef in terms:
            coefficients[(handle, i)] = coef / sd if sd > 0 else 0.0
        signal[:, i] = s
    scale = np.asarray(spec.amplitudes) * np.sqrt(m_cells)
    if spec.signal:
        unit = (spec.snr * signal + noise) / np.sqrt(spec.snr**2 + 1.0)
    else:
        unit = noise
    loadings = unit * scale
    eps = spec.noise_scale * rng.standard_normal((n_years, m_cells))
    z_flat = loadings @ patterns + eps
    grid = GridSpec(spec.lat_start, spec.lon_start, spec.cell_size, spec.n_lat, spec.n_lon)
    z = GridStack(grid, years, z_flat.reshape(n_years, *grid.shape), "transformed")

    # wetter in the north-west, a dry corner in the south-east
    yy, xx = np.meshgrid(np.linspace(0, 1, spec.n_lat), np.linspace(0, 1, spec.n_lon), indexing="ij")
    base = 20.0 + 380.0 * np.exp(-2.5 * ((1 - yy) ** 2 + xx**2))
    # additive anomalies keep the per-cell transform scale proportional to
    # the spread of z, so transformed anomalies follow the planted basis;
    # the scale keeps every total above floor * base.min()
    mm_per_unit = (1.0 - spec.floor) * base.min() / max(np.abs(z.values).max(), 1.0)
    totals = base[None] + mm_per_unit * z.values
    total_stack = GridStack(grid, years, totals, "total")

    months = SEASONS[spec.season]
    share = np.array([1.0 + 0.1 * j for j in range(len(months))])
    share = share / share.sum()
    m_keys = [(int(y), m) for y in years for m in months]
    m_vals = np.stack([totals[t] * share[j] for t in range(n_years) for j in range(len(months))])
    monthly = MonthlyStack(grid, [k[0] for k in m_keys], [k[1] for k in m_keys], m_vals)

    members = []
    for _ in range(spec.n_members):
        member_z = loadings @ patterns * 0.5 + rng.standard_normal((n_years, m_cells))
        member_tot = spec.member_bias * base[None] * np.exp(spec.gamma * member_z.reshape(n_years, *grid.shape))
        members.append(GridStack(grid, years, member_tot, "total"))

    truth = SyntheticTruth(patterns, loadings, signal, z, base, indices, spec.planted, coefficients)
    return SyntheticDataset(spec, total_stack, monthly, fields, members, truth)


def write_synthetic(ds: SyntheticDataset, directory, with_fields=True):
    """Write a dataset as CSV inputs plus a ready-to-run config and a
    JSON truth record; returns the config path."""
    import json
    from pathlib import Path

    from .config import ExperimentConfig, write_config
    from .features import write_index_series
    from .grids import write_grid_stack, write_monthly_stack

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_monthly_stack(ds.monthly_precip, directory / "precip.csv")
    inputs = {"precip": str(directory / "precip.csv")}
    series = compute_indices(ds.fields, load_registry(), ds.truth.z.years)
    write_index_series(list(series.values()), directory / "indices.csv")
    if with_fields:
        for var, stack in ds.fields.items():
            write_monthly_stack(stack, directory / f"{var}.csv")
            inputs[var] = str(directory / f"{var}.csv")
    else:
        inputs["indices"] = str(directory / "indices.csv")
    members = []
    for n, member in enumerate(ds.members):
        path = directory / f"member_{n:02d}.csv"
        write_grid_stack(member, path)
        members.append(str(path))
    if members:
        inputs["members"] = ",".join(members)

    truth = {
        "spec": {k: v for k, v in vars(ds.spec).items()},
        "years": [int(y) for y in ds.truth.z.years],
        "loadings": ds.truth.loadings.tolist(),
        "signal": ds.truth.signal.tolist(),
        "indices": {h: v.tolist() for h, v in ds.truth.indices.items()},
        "coefficients": [[h, i, c] for (h, i), c in ds.truth.coefficients.items()],
    }
    with open(directory / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1)
    config = ExperimentConfig(
        season=ds.spec.season,
        predictor_month=ds.spec.predictor_month,
        ref_years=tuple(int(y) for y in ds.truth.z.years),
        k=ds.spec.k_star,
        inputs=inputs,
        out=str(directory / "run"),
    )
    path = directory / "config.ini"
    write_config(config, path)
    return path

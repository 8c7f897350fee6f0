"""Rank-based Gaussianizing quantile mapping of precipitation anomalies.

Reference-year anomalies at a cell are replaced by normal quantiles
``sigma * Q(r / (n + 1))`` of their rank ``r``; other years are placed by
linear interpolation between the bracketing reference values and clamped
to ``sigma * Q(1 / (n + 2))`` / ``sigma * Q((n + 1) / (n + 2))`` outside
the reference range. The per-cell scale ``sigma`` is the standard
deviation of the reference anomalies, so wet cells keep more weight than
dry ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .grids import MIN_CLIMATOLOGY, GridSpec, GridStack, check_same_grid, write_grid_stack
from .normal import norm_ppf


def reference_quantiles(n):
    """Standard normal quantiles ``Q(r / (n + 1))`` for ranks ``r = 1..n``.

    Antisymmetry ``q[r] == -q[n + 1 - r]`` is enforced exactly.
    """
    q = norm_ppf(np.arange(1, n + 1) / (n + 1))
    q = 0.5 * (q - q[::-1])
    return q


def clamp_quantiles(n):
    lo = float(norm_ppf(1.0 / (n + 2)))
    return lo, -lo


@dataclass
class TransformModel:
    spec: GridSpec
    ref_years: np.ndarray
    sorted_y: np.ndarray  # (n, n_lat, n_lon) ascending reference anomalies
    sorted_years: np.ndarray  # year that produced each order statistic
    sigma: np.ndarray  # (n_lat, n_lon)
    usable: np.ndarray  # cells with a complete reference sample

    @property
    def n(self):
        return len(self.ref_years)

    @property
    def quantiles(self):
        return reference_quantiles(self.n)

    @property
    def z_ref(self):
        """Reference z-quantiles per order statistic, shape ``(n, n_lat, n_lon)``."""
        return self.quantiles[:, None, None] * self.sigma[None]

    def reference_z(self, year):
        """Transformed value of a reference year at every cell."""
        hit = self.sorted_years == int(year)
        z = np.where(hit, self.z_ref, 0.0).sum(axis=0)
        return np.where(self.usable, z, np.nan)


def fit_transform_model(anomalies: GridStack, ref_years) -> TransformModel:
    if anomalies.kind != "anomaly":
        raise ConfigurationError(f"transform needs anomalies, got {anomalies.kind}")
    ref_years = np.array(sorted(set(int(y) for y in ref_years)), dtype=np.int64)
    n = len(ref_years)
    if n < MIN_CLIMATOLOGY:
        raise ConfigurationError(f"need at least {MIN_CLIMATOLOGY} reference years, got {n}")
    ref = anomalies.values[anomalies.year_index(ref_years)]
    usable = anomalies.spec.valid_mask & np.isfinite(ref).all(axis=0)
    ref = np.where(usable, ref, 0.0)
    # stable sort: ties keep ascending-year order
    order = np.argsort(ref, axis=0, kind="stable")
    sorted_y = np.take_along_axis(ref, order, axis=0)
    sorted_years = ref_years[order]
    sigma = ref.std(axis=0, ddof=1)
    sorted_y[:, ~usable] = np.nan
    sigma = np.where(usable, sigma, np.nan)
    return TransformModel(anomalies.spec, ref_years, sorted_y, sorted_years, sigma, usable)


def transform_values(model: TransformModel, values):
    """Map a single field of non-reference anomalies through the
    interpolation/clamping rule."""
    n = model.n
    y = model.sorted_y
    z = model.z_ref
    v = np.asarray(values, dtype=float)
    below = (y < v[None]).sum(axis=0)  # index of first order statistic >= v
    lo_idx = np.clip(below - 1, 0, n - 1)
    hi_idx = np.clip(below, 0, n - 1)
    y1 = np.take_along_axis(y, lo_idx[None], axis=0)[0]
    y2 = np.take_along_axis(y, hi_idx[None], axis=0)[0]
    z1 = np.take_along_axis(z, lo_idx[None], axis=0)[0]
    z2 = np.take_along_axis(z, hi_idx[None], axis=0)[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        interp = z1 + (v - y1) * (z2 - z1) / (y2 - y1)
    out = np.where(y2 == v, z2, interp)
    qlo, qhi = clamp_quantiles(n)
    out = np.where(below == 0, np.where(y[0] == v, z[0], qlo * model.sigma), out)
    out = np.where(below == n, qhi * model.sigma, out)
    out = np.where(model.usable & np.isfinite(v), out, np.nan)
    return out


def transform(model: TransformModel, anomalies: GridStack) -> GridStack:
    if anomalies.spec is not model.spec:
        check_same_grid(model.spec, anomalies.spec)
    ref = set(int(y) for y in model.ref_years)
    out = np.empty_like(anomalies.values)
    for t, year in enumerate(anomalies.years):
        if int(year) in ref:
            out[t] = model.reference_z(year)
        else:
            out[t] = transform_values(model, anomalies.values[t])
    return GridStack(anomalies.spec, anomalies.years, out, "transformed")


def write_transformed(stack: GridStack, model: TransformModel, path):
    """Grid-stack CSV plus a ``key=value`` sidecar next to it."""
    path = Path(path)
    write_grid_stack(stack, path)
    years = ",".join(str(int(y)) for y in model.ref_years)
    meta = path.with_suffix(path.suffix + ".meta")
    meta.write_text(f"kind={stack.kind}\nref_years={years}\nn={model.n}\n", encoding="utf-8")


def read_sidecar(path):
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta

"""Gridded data model: ingestion, seasonal totals, anomalies, aggregation,
masks and tercile categories.

Fields are held as ``(n_times, n_lat, n_lon)`` float arrays with ``NaN`` as
the missing marker. Cells outside the grid's valid mask are always ``NaN``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ConfigurationError,
    DomainError,
    DuplicationError,
    GeometryError,
    GridMismatchError,
    IncompleteSeasonError,
    InsufficientClimatologyError,
    ParseError,
)

COORD_TOL = 1e-6
MIN_CLIMATOLOGY = 6

SEASONS = {
    "jf": (1, 2),
    "mam": (3, 4, 5),
    "jjas": (6, 7, 8, 9),
    "ond": (10, 11, 12),
}

KINDS = ("total", "anomaly", "transformed")


@dataclass(frozen=True, eq=False)
class GridSpec:
    lat_start: float
    lon_start: float
    cell_size: float
    n_lat: int
    n_lon: int
    valid_mask: np.ndarray = None

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigurationError("cell_size must be positive")
        if self.n_lat < 1 or self.n_lon < 1:
            raise ConfigurationError("grid needs at least one row and column")
        mask = self.valid_mask
        if mask is None:
            mask = np.ones((self.n_lat, self.n_lon), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.size != self.n_lat * self.n_lon:
            raise ConfigurationError(
                f"valid_mask has {mask.size} entries, grid has {self.n_lat * self.n_lon}"
            )
        mask = mask.reshape(self.n_lat, self.n_lon).copy()
        mask.flags.writeable = False
        object.__setattr__(self, "valid_mask", mask)

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def lats(self):
        return self.lat_start + self.cell_size * np.arange(self.n_lat)

    @property
    def lons(self):
        return self.lon_start + self.cell_size * np.arange(self.n_lon)

    @property
    def n_valid(self):
        return int(self.valid_mask.sum())

    def cell_index(self, lat, lon):
        """Row/column of the cell centred at ``(lat, lon)``."""
        fi = (lat - self.lat_start) / self.cell_size
        fj = (lon - self.lon_start) / self.cell_size
        i, j = round(fi), round(fj)
        if (
            abs(lat - (self.lat_start + i * self.cell_size)) > COORD_TOL
            or abs(lon - (self.lon_start + j * self.cell_size)) > COORD_TOL
            or not (0 <= i < self.n_lat and 0 <= j < self.n_lon)
        ):
            raise GridMismatchError(f"({lat}, {lon}) is not a cell centre of the grid")
        return i, j

    def same_geometry(self, other):
        return (
            self.n_lat == other.n_lat
            and self.n_lon == other.n_lon
            and math.isclose(self.cell_size, other.cell_size, abs_tol=COORD_TOL)
            and math.isclose(self.lat_start, other.lat_start, abs_tol=COORD_TOL)
            and math.isclose(self.lon_start, other.lon_start, abs_tol=COORD_TOL)
        )

    def with_mask(self, mask):
        return replace(self, valid_mask=mask)


def check_same_grid(a: GridSpec, b: GridSpec):
    if not a.same_geometry(b) or not np.array_equal(a.valid_mask, b.valid_mask):
        raise GeometryError("grids differ")


@dataclass
class GridStack:
    spec: GridSpec
    years: np.ndarray
    values: np.ndarray
    kind: str = "total"

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.values = np.array(self.values, dtype=float)
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown stack kind {self.kind!r}")
        if self.values.shape != (len(self.years), *self.spec.shape):
            raise ConfigurationError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.years)} years on a {self.spec.shape} grid"
            )
        if len(self.years) > 1 and np.any(np.diff(self.years) <= 0):
            raise ConfigurationError("years must be strictly increasing")
        self.values[:, ~self.spec.valid_mask] = np.nan

    def year_index(self, years):
        lookup = {int(y): i for i, y in enumerate(self.years)}
        try:
            return np.array([lookup[int(y)] for y in years], dtype=np.int64)
        except KeyError as exc:
            raise ConfigurationError(f"year {exc.args[0]} not in stack") from None

    def field(self, year):
        return self.values[self.year_index([year])[0]]

    def subset(self, years):
        years = sorted(int(y) for y in years)
        return GridStack(self.spec, years, self.values[self.year_index(years)], self.kind)


@dataclass
class MonthlyStack:
    """Fields keyed by ``(year, month)``; used for monthly precipitation
    and predictor fields (SST, winds)."""

    spec: GridSpec
    years: np.ndarray
    months: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.months = np.asarray(self.months, dtype=np.int64)
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != (len(self.years), *self.spec.shape):
            raise ConfigurationError("values shape does not match keys and grid")
        keys = self.years * 100 + self.months
        if len(np.unique(keys)) != len(keys):
            raise DuplicationError("duplicate (year, month) keys")
        order = np.argsort(keys, kind="stable")
        self.years, self.months, self.values = self.years[order], self.months[order], self.values[order]
        self.values[:, ~self.spec.valid_mask] = np.nan
        self._index = {(int(y), int(m)): i for i, (y, m) in enumerate(zip(self.years, self.months))}

    def has(self, year, month):
        return (int(year), int(month)) in self._index

    def field(self, year, month):
        return self.values[self._index[(int(year), int(month))]]


@dataclass
class CategoryStack:
    spec: GridSpec
    years: np.ndarray
    categories: np.ndarray  # float: -1, 0, 1 or NaN

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.categories = np.asarray(self.categories, dtype=float)
        finite = self.categories[np.isfinite(self.categories)]
        if not np.all(np.isin(finite, (-1.0, 0.0, 1.0))):
            raise ConfigurationError("categories must be -1, 0, 1 or missing")

    def field(self, year):
        idx = int(np.flatnonzero(self.years == year)[0])
        return self.categories[idx]


@dataclass
class Mask:
    spec: GridSpec
    included: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.included is None:
            self.included = self.spec.valid_mask.copy()
        self.included = np.asarray(self.included, dtype=bool) & self.spec.valid_mask


# ---------------------------------------------------------------------------
# CSV input / output


def _fmt(value):
    return "NA" if not np.isfinite(value) else repr(float(value))


def _parse_value(text, line):
    text = text.strip()
    if text in ("NA", ""):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"bad number {text!r}", line) from None


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"header lacks columns {missing}", 1)
        cols = {name: header.index(name) for name in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            yield lineno, {name: row[i] for name, i in cols.items()}


def _parse_int(text, line):
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"bad integer {text!r}", line) from None


def csv_has_column(path, column):
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return column in [h.strip() for h in header]


def _fast_columns(path, required, ints=()):
    """Columns of a regular CSV as arrays, or ``None`` when anything needs
    the row-by-row reader (which then reports the offending line)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh))]
    except (StopIteration, UnicodeDecodeError):
        return None
    if any(c not in header for c in required) or len(set(header)) != len(header):
        return None
    dtype = {c: (np.int64 if c in ints else float) for c in required}
    try:
        df = pd.read_csv(path, names=header, header=0, usecols=list(required), dtype=dtype, engine="c",
                         na_values=["NA", ""], keep_default_na=False, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError, TypeError, OverflowError):
        return None
    if len(df) == 0:
        return None
    # short rows would read as missing values; every row must be complete
    with open(path, "rb") as fh:
        if fh.read().count(b",") != (len(header) - 1) * (len(df) + 1):
            return None
    return {c: df[c].to_numpy() for c in required}


def _fast_cells(spec, lat, lon):
    """Vectorized :meth:`GridSpec.cell_index`; ``None`` if any coordinate
    is off the grid."""
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        return None
    i = np.rint((lat - spec.lat_start) / spec.cell_size)
    j = np.rint((lon - spec.lon_start) / spec.cell_size)
    ok = (
        (np.abs(lat - (spec.lat_start + i * spec.cell_size)) <= COORD_TOL)
        & (np.abs(lon - (spec.lon_start + j * spec.cell_size)) <= COORD_TOL)
        & (i >= 0) & (i < spec.n_lat) & (j >= 0) & (j < spec.n_lon)
    )
    if not ok.all():
        return None
    return i.astype(np.int64), j.astype(np.int64)


def infer_grid_spec(path):
    """Build a GridSpec whose valid cells are those appearing in ``path``."""
    cols = _fast_columns(path, ("lat", "lon"))
    if cols is not None and np.all(np.isfinite(cols["lat"])) and np.all(np.isfinite(cols["lon"])):
        lats, lons = set(np.unique(cols["lat"]).tolist()), set(np.unique(cols["lon"]).tolist())
    else:
        cols = None
        lats, lons = set(), set()
        for lineno, row in _read_rows(path, ("lat", "lon")):
            lats.add(_parse_value(row["lat"], lineno))
            lons.add(_parse_value(row["lon"], lineno))
    if not lats:
        raise ParseError("no data rows", 2)
    la, lo = np.array(sorted(lats)), np.array(sorted(lons))
    steps = np.concatenate([np.diff(la), np.diff(lo)])
    steps = steps[steps > COORD_TOL]
    cell = float(steps.min()) if len(steps) else 1.0
    n_lat = int(round((la[-1] - la[0]) / cell)) + 1
    n_lon = int(round((lo[-1] - lo[0]) / cell)) + 1
    spec = GridSpec(float(la[0]), float(lo[0]), cell, n_lat, n_lon, np.zeros((n_lat, n_lon), bool))
    mask = np.zeros(spec.shape, dtype=bool)
    cells = None if cols is None else _fast_cells(spec, cols["lat"], cols["lon"])
    if cells is not None:
        mask[cells] = True
    else:
        for lineno, row in _read_rows(path, ("lat", "lon")):
            i, j = spec.cell_index(_parse_value(row["lat"], lineno), _parse_value(row["lon"], lineno))
            mask[i, j] = True
    return spec.with_mask(mask)


def _scan_records(path, spec, time_cols):
    records = {}
    for lineno, row in _read_rows(path, ("lat", "lon", *time_cols, "value")):
        lat = _parse_value(row["lat"], lineno)
        lon = _parse_value(row["lon"], lineno)
        if not (np.isfinite(lat) and np.isfinite(lon)):
            raise ParseError("missing coordinate", lineno)
        key = tuple(_parse_int(row[c], lineno) for c in time_cols)
        try:
            i, j = spec.cell_index(lat, lon)
        except GridMismatchError as exc:
            raise GridMismatchError(f"line {lineno}: {exc}") from None
        cell_key = (key, i, j)
        if cell_key in records:
            raise DuplicationError(f"line {lineno}: duplicate value for cell ({lat}, {lon}) at {key}")
        records[cell_key] = _parse_value(row["value"], lineno)
    return records


def _load_records(path, spec, time_cols):
    """``(keys, values)``: sorted unique time keys (tuples) and a
    ``(n_keys, n_lat, n_lon)`` array."""
    cols = _fast_columns(path, ("lat", "lon", *time_cols, "value"), ints=time_cols)
    cells = None if cols is None else _fast_cells(spec, cols["lat"], cols["lon"])
    if cells is not None:
        # lexicographic code over the time columns
        levels, code = [], np.zeros(len(cols["value"]), dtype=np.int64)
        for c in time_cols:
            lv, inv = np.unique(cols[c], return_inverse=True)
            levels.append(lv)
            code = code * len(lv) + inv.ravel()
        uniq, pos = np.unique(code, return_inverse=True)
        pos = pos.ravel()
        parts, rest = [], uniq
        for lv in reversed(levels):
            parts.append(lv[rest % len(lv)])
            rest = rest // len(lv)
        uniq = np.column_stack(parts[::-1])
        flat = (pos * spec.n_lat + cells[0]) * spec.n_lon + cells[1]
        if len(np.unique(flat)) == len(flat):
            values = np.full((len(uniq), *spec.shape), np.nan)
            values[pos, cells[0], cells[1]] = cols["value"]
            return [tuple(int(v) for v in row) for row in uniq], values
    # irregular input: the row reader raises with a line number
    records = _scan_records(path, spec, time_cols)
    keys = sorted({key for key, _, _ in records})
    pos = {k: n for n, k in enumerate(keys)}
    values = np.full((len(keys), *spec.shape), np.nan)
    for (key, i, j), v in records.items():
        values[pos[key], i, j] = v
    return keys, values


def load_grid_stack(path, spec: GridSpec, kind="total") -> GridStack:
    """Read a long-format ``lat,lon,year,value`` CSV onto ``spec``."""
    keys, values = _load_records(path, spec, ("year",))
    return GridStack(spec, [k[0] for k in keys], values, kind)


def load_monthly_stack(path, spec: GridSpec) -> MonthlyStack:
    """Read the monthly ``lat,lon,year,month,value`` variant."""
    keys, values = _load_records(path, spec, ("year", "month"))
    for year, month in keys:
        if not 1 <= month <= 12:
            raise ParseError(f"month {month} out of range")
    return MonthlyStack(spec, [k[0] for k in keys], [k[1] for k in keys], values)


def _cells(spec):
    for i, j in zip(*np.nonzero(spec.valid_mask)):
        yield i, j, repr(float(spec.lats[i])), repr(float(spec.lons[j]))


def write_grid_stack(stack: GridStack, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("lat,lon,year,value\n")
        cells = list(_cells(stack.spec))
        for t, year in enumerate(stack.years):
            for i, j, lat, lon in cells:
                fh.write(f"{lat},{lon},{int(year)},{_fmt(stack.values[t, i, j])}\n")


def write_monthly_stack(stack: MonthlyStack, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("lat,lon,year,month,value\n")
        cells = list(_cells(stack.spec))
        for t, (year, month) in enumerate(zip(stack.years, stack.months)):
            for i, j, lat, lon in cells:
                fh.write(f"{lat},{lon},{int(year)},{int(month)},{_fmt(stack.values[t, i, j])}\n")


def write_mask(mask: Mask, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("lat,lon,included\n")
        for i, j, lat, lon in _cells(mask.spec):
            fh.write(f"{lat},{lon},{int(mask.included[i, j])}\n")


def load_mask(path, spec: GridSpec) -> Mask:
    included = np.zeros(spec.shape, dtype=bool)
    for lineno, row in _read_rows(path, ("lat", "lon", "included")):
        i, j = spec.cell_index(_parse_value(row["lat"], lineno), _parse_value(row["lon"], lineno))
        flag = row["included"].strip()
        if flag not in ("0", "1"):
            raise ParseError(f"included must be 0 or 1, got {flag!r}", lineno)
        included[i, j] = flag == "1"
    return Mask(spec, included)


def write_categories(cats: CategoryStack, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("lat,lon,year,category\n")
        cells = list(_cells(cats.spec))
        for t, year in enumerate(cats.years):
            for i, j, lat, lon in cells:
                c = cats.categories[t, i, j]
                fh.write(f"{lat},{lon},{int(year)},{'NA' if np.isnan(c) else int(c)}\n")


# ---------------------------------------------------------------------------
# Operations


def seasonal_total(monthly: MonthlyStack, season_months, years=None) -> GridStack:
    """Sum monthly fields over ``season_months`` for every year.

    ``years`` defaults to every year that appears in ``monthly``.
    """
    if isinstance(season_months, str):
        season_months = SEASONS[season_months.lower()]
    if years is None:
        years = sorted(set(int(y) for y in monthly.years))
    out = np.zeros((len(years), *monthly.spec.shape))
    for n, year in enumerate(years):
        for month in season_months:
            if not monthly.has(year, month):
                raise IncompleteSeasonError(year, month)
            out[n] += monthly.field(year, month)
    return GridStack(monthly.spec, years, out, "total")


def _ref_values(stack, ref_years):
    ref_years = sorted(set(int(y) for y in ref_years))
    if not ref_years:
        raise ConfigurationError("reference period is empty")
    return stack.values[stack.year_index(ref_years)]


def compute_anomalies(stack: GridStack, ref_years) -> GridStack:
    """Subtract the per-cell mean over ``ref_years``; no scaling."""
    if stack.kind != "total":
        raise ConfigurationError(f"anomalies need a total stack, got {stack.kind}")
    clim = _ref_values(stack, ref_years).mean(axis=0)
    return GridStack(stack.spec, stack.years, stack.values - clim, "anomaly")


def aggregate_grid(stack: GridStack, factor: int, min_coverage=0.5, area_weighting=False) -> GridStack:
    """Upscale by block-averaging ``factor x factor`` blocks of fine cells.

    A coarse cell is valid when at least ``min_coverage`` of its fine cells
    are valid; its value is the mean of those valid fine cells (missing if
    any of them is missing).
    """
    spec = stack.spec
    factor = int(factor)
    if factor < 1:
        raise GeometryError("aggregation factor must be positive")
    if spec.n_lat % factor or spec.n_lon % factor:
        raise GeometryError(f"factor {factor} does not divide the {spec.n_lat}x{spec.n_lon} grid")
    if factor == 1:
        return GridStack(spec, stack.years, stack.values.copy(), stack.kind)
    cl, cm = spec.n_lat // factor, spec.n_lon // factor
    valid = spec.valid_mask.reshape(cl, factor, cm, factor)
    if area_weighting:
        w = np.cos(np.deg2rad(spec.lats))[:, None] * np.ones(spec.n_lon)
    else:
        w = np.ones(spec.shape)
    w = np.where(spec.valid_mask, w, 0.0).reshape(cl, factor, cm, factor)
    coverage = valid.sum(axis=(1, 3)) / factor**2
    coarse_valid = coverage >= min_coverage - 1e-12

    vals = np.where(spec.valid_mask, stack.values, 0.0).reshape(-1, cl, factor, cm, factor)
    # any missing valid fine cell propagates to the coarse cell
    bad = (np.isnan(stack.values) & spec.valid_mask).reshape(-1, cl, factor, cm, factor).any(axis=(2, 4))
    wsum = w.sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (vals * w).sum(axis=(2, 4)) / wsum
    means[bad] = np.nan

    half = (factor - 1) / 2 * spec.cell_size
    coarse = GridSpec(
        spec.lat_start + half, spec.lon_start + half, spec.cell_size * factor, cl, cm, coarse_valid
    )
    return GridStack(coarse, stack.years, means, stack.kind)


def tercile_order_stats(n):
    """1-based order statistics used as lower and upper tercile boundaries.

    The lower boundary is order statistic ``a = round(n/3)`` and the upper is
    its mirror ``n + 1 - a``; on tie-free data each category then holds a
    count within one of ``n/3``.
    """
    a = max(1, int(math.floor(n / 3 + 0.5)))
    return a, n + 1 - a


def tercile_bounds(sample, axis=0):
    """Lower/upper tercile boundaries of ``sample`` along ``axis``."""
    s = np.sort(sample, axis=axis)
    n = s.shape[axis]
    a, b = tercile_order_stats(n)
    lo = np.take(s, a - 1, axis=axis)
    hi = np.take(s, b - 1, axis=axis)
    missing = np.isnan(sample).any(axis=axis)
    lo = np.where(missing, np.nan, lo)
    hi = np.where(missing, np.nan, hi)
    return lo, hi


def categorize(values, lo, hi):
    """-1 if value <= lo, +1 if value >= hi, else 0; NaN propagates."""
    cat = np.where(values <= lo, -1.0, np.where(values >= hi, 1.0, 0.0))
    return np.where(np.isnan(values) | np.isnan(lo) | np.isnan(hi), np.nan, cat)


def dry_mask(stack: GridStack, ref_years, drop_fraction=0.25) -> Mask:
    """Mask out the driest cells and cells whose terciles are ill-defined.

    Cells are ranked by climatological mean seasonal total over
    ``ref_years``; the ``floor(drop_fraction * count)`` lowest are dropped,
    together with every cell tied with the cutoff value. If the tie group
    at the cutoff reaches the wettest cell the rank criterion drops
    nothing. Cells whose lower tercile boundary is zero are dropped too.
    """
    if stack.kind != "total":
        raise ConfigurationError("dry mask needs seasonal totals")
    spec = stack.spec
    if spec.n_valid == 0:
        raise DomainError("grid has no valid cells")
    ref = _ref_values(stack, ref_years)
    clim = ref.mean(axis=0)
    usable = spec.valid_mask & np.isfinite(clim)
    included = usable.copy()

    means = clim[usable]
    m = int(math.floor(drop_fraction * means.size))
    if m > 0:
        cutoff = np.sort(means)[m - 1]
        if cutoff < means.max():
            included &= ~(clim <= cutoff)

    lo, hi = tercile_bounds(ref, axis=0)
    included &= ~((lo == 0) | (hi == 0))
    return Mask(spec, included)


def tercile_categories(stack: GridStack, ref_years, exclude_target=False) -> CategoryStack:
    """Observed tercile category of every cell and year.

    With ``exclude_target`` the boundaries for a reference year are computed
    from the reference sample with that year removed.
    """
    if stack.kind not in ("total", "anomaly"):
        raise ConfigurationError("categories need totals or anomalies")
    ref_years = sorted(set(int(y) for y in ref_years))
    n_full = len(ref_years)
    if n_full - (1 if exclude_target else 0) < MIN_CLIMATOLOGY:
        raise InsufficientClimatologyError(
            f"{n_full} reference years is below the minimum of {MIN_CLIMATOLOGY}"
        )
    ref = stack.values[stack.year_index(ref_years)]
    lo_all, hi_all = tercile_bounds(ref, axis=0)
    out = np.empty_like(stack.values)
    ref_pos = {y: n for n, y in enumerate(ref_years)}
    for t, year in enumerate(stack.years):
        if exclude_target and int(year) in ref_pos:
            keep = np.arange(n_full) != ref_pos[int(year)]
            lo, hi = tercile_bounds(ref[keep], axis=0)
        else:
            lo, hi = lo_all, hi_all
        out[t] = categorize(stack.values[t], lo, hi)
    return CategoryStack(stack.spec, stack.years, out)


def category_correlation(a: CategoryStack, b: CategoryStack):
    """Per-cell Pearson correlation of two category series.

    ``NaN`` where either series is constant or has a missing year.
    """
    if not a.spec.same_geometry(b.spec) or not np.array_equal(a.years, b.years):
        raise GeometryError("category stacks differ in grid or years")
    x, y = a.categories, b.categories
    xm = x - x.mean(axis=0)
    ym = y - y.mean(axis=0)
    sxx = (xm**2).sum(axis=0)
    syy = (ym**2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xm * ym).sum(axis=0) / np.sqrt(sxx * syy)
    r[(sxx == 0) | (syy == 0)] = np.nan
    return r

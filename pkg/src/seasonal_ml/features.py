"""Climate indices, predictor pre-selection and feature construction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import (
    ConfigurationError,
    DegenerateIndexError,
    FeatureMismatchError,
    GeometryError,
    ParseError,
)
from .grids import MonthlyStack
from .normal import norm_sf

log = logging.getLogger(__name__)

FORMULAS = ("box_mean", "box_difference", "composite", "diff")
VARIABLES = ("sst", "u850", "u200")
ALPHA_BUDGET = 0.1
TREND = "trend"


@dataclass(frozen=True)
class Box:
    lat1: float
    lat2: float
    lon1: float
    lon2: float

    def contains(self, lats, lons):
        lat_lo, lat_hi = sorted((self.lat1, self.lat2))
        lon = np.mod(lons, 360.0)
        a, b = self.lon1 % 360.0, self.lon2 % 360.0
        if a <= b:
            in_lon = (lon >= a) & (lon <= b)
        else:
            in_lon = (lon >= a) | (lon <= b)
        return ((lats >= lat_lo) & (lats <= lat_hi))[:, None] & in_lon[None, :]


@dataclass(frozen=True)
class IndexDefinition:
    handle: str
    formula: str
    source_variable: str
    boxes: tuple = ()
    terms: tuple = ()  # composite: (handle, weight); diff: (source handle, lag)
    standardized: bool = False

    def __post_init__(self):
        if self.formula not in FORMULAS:
            raise ConfigurationError(f"{self.handle}: unknown formula {self.formula!r}")
        if self.formula in ("box_mean", "box_difference") and not self.boxes:
            raise ConfigurationError(f"{self.handle}: no boxes")
        if self.formula == "box_difference" and len(self.boxes) != 2:
            raise ConfigurationError(f"{self.handle}: box_difference needs two boxes")
        if self.formula in ("composite", "diff") and not self.terms:
            raise ConfigurationError(f"{self.handle}: no terms")

    @property
    def depends_on(self):
        if self.formula in ("composite", "diff"):
            return tuple(t[0] for t in self.terms)
        return ()


def parse_registry(text):
    """Parse ``handle|formula|var|boxes-or-terms|standardized`` lines."""
    defs = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 5:
            raise ParseError(f"expected 5 '|'-separated fields, got {len(parts)}", lineno)
        handle, formula, var, spec, std = parts
        if var not in VARIABLES:
            raise ParseError(f"unknown variable {var!r}", lineno)
        if std not in ("0", "1"):
            raise ParseError("standardized flag must be 0 or 1", lineno)
        boxes, terms = (), ()
        try:
            if formula in ("composite", "diff"):
                items = []
                for item in spec.split(";"):
                    name, weight = item.split(":")
                    name = name.strip()
                    if name not in seen:
                        raise ParseError(f"{handle} references undefined index {name!r}", lineno)
                    if formula == "diff":
                        items.append((name, int(weight)))
                    else:
                        items.append((name, float(Fraction(weight.strip()))))
                terms = tuple(items)
            else:
                boxes = tuple(Box(*(float(v) for v in b.split(","))) for b in spec.split(";"))
        except ParseError:
            raise
        except (ValueError, TypeError):
            raise ParseError(f"bad box/term specification {spec!r}", lineno) from None
        try:
            defs.append(IndexDefinition(handle, formula, var, boxes, terms, std == "1"))
        except ConfigurationError as exc:
            raise ParseError(str(exc), lineno) from None
        seen.add(handle)
    return defs


def load_registry(path=None):
    if path is None:
        text = resources.files("seasonal_ml").joinpath("data/indices.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_registry(text)


@dataclass
class IndexSeries:
    handle: str
    years: np.ndarray
    months: np.ndarray
    values: np.ndarray
    ref_years: tuple = ()

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.months = np.asarray(self.months, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self._pos = {(int(y), int(m)): i for i, (y, m) in enumerate(zip(self.years, self.months))}

    def get(self, year, month):
        i = self._pos.get((int(year), int(month)))
        return math.nan if i is None else float(self.values[i])

    def at_month(self, month, years):
        return np.array([self.get(y, month) for y in years])


# ---------------------------------------------------------------------------
# Index computation


def box_series(fields: MonthlyStack, box: Box):
    """Cosine-latitude weighted box mean for every ``(year, month)``."""
    spec = fields.spec
    inside = box.contains(spec.lats, spec.lons) & spec.valid_mask
    half = spec.cell_size / 2
    lat_lo, lat_hi = sorted((box.lat1, box.lat2))
    covered_lat = lat_lo >= spec.lats[0] - half and lat_hi <= spec.lats[-1] + half
    if not inside.any() or not covered_lat:
        raise GeometryError(f"box {box} is not covered by the predictor grid")
    w = np.cos(np.deg2rad(spec.lats))[:, None] * inside
    w = w[inside]
    vals = fields.values[:, inside]
    return (vals * w).sum(axis=1) / w.sum()


def _ref_mask(years, ref_years, loyo_year):
    ref = set(int(y) for y in ref_years)
    if loyo_year is not None:
        ref.discard(int(loyo_year))
    return np.isin(years, sorted(ref))


def standardize_series(years, months, values, ref_years, loyo_year=None, scale=True):
    """Per-calendar-month anomalies (and optionally division by the
    standard deviation) relative to ``ref_years`` minus ``loyo_year``."""
    years = np.asarray(years)
    months = np.asarray(months)
    values = np.asarray(values, dtype=float)
    in_ref = _ref_mask(years, ref_years, loyo_year)
    out = np.full_like(values, np.nan)
    for m in np.unique(months):
        sel = months == m
        ref_vals = values[sel & in_ref]
        if ref_vals.size < 2:
            continue
        mean = ref_vals.mean()
        if not scale:
            out[sel] = values[sel] - mean
            continue
        sd = ref_vals.std(ddof=1)
        if np.isfinite(sd) and sd <= 1e-12 * max(1.0, abs(mean)):
            raise DegenerateIndexError(f"zero variance in month {m} over the reference years")
        out[sel] = (values[sel] - mean) / sd
    return out


def index_difference(series: IndexSeries, lag=1) -> IndexSeries:
    """``value(year, month) - value(year, month - lag)``, wrapping into the
    previous year."""
    out = np.empty(len(series.values))
    for n, (y, m) in enumerate(zip(series.years, series.months)):
        pm = int(m) - lag
        py = int(y)
        while pm < 1:
            pm += 12
            py -= 1
        out[n] = series.values[n] - series.get(py, pm)
    return IndexSeries(f"{series.handle}_d{lag}", series.years, series.months, out, series.ref_years)


def compute_index(
    fields,
    definition: IndexDefinition,
    ref_years,
    loyo_year=None,
    computed=None,
    box_cache=None,
) -> IndexSeries:
    """Evaluate one registry entry.

    ``fields`` is a MonthlyStack or a mapping from variable name to one.
    ``computed`` maps handles to already evaluated series (for composite
    and difference entries). ``box_cache`` may hold raw box means keyed by
    ``(variable, box)`` to avoid re-averaging the fields every fold.
    """
    d = definition
    ref_tuple = tuple(sorted(int(y) for y in ref_years if loyo_year is None or int(y) != int(loyo_year)))

    if d.formula == "diff":
        src, lag = d.terms[0]
        out = index_difference(computed[src], lag)
        values = out.values
        if d.standardized:
            values = standardize_series(out.years, out.months, values, ref_years, loyo_year)
        return IndexSeries(d.handle, out.years, out.months, values, ref_tuple)

    if d.formula == "composite":
        first = computed[d.terms[0][0]]
        years, months = first.years, first.months
        values = np.zeros(len(years))
        for name, weight in d.terms:
            s = computed[name]
            values = values + weight * np.array([s.get(y, m) for y, m in zip(years, months)])
    else:
        stack = fields[d.source_variable] if isinstance(fields, dict) else fields
        years, months = stack.years, stack.months

        def raw(box):
            key = (d.source_variable, box)
            if box_cache is not None and key in box_cache:
                return box_cache[key]
            series = box_series(stack, box)
            if box_cache is not None:
                box_cache[key] = series
            return series

        if d.formula == "box_mean":
            values = standardize_series(years, months, raw(d.boxes[0]), ref_years, loyo_year, scale=d.standardized)
            return IndexSeries(d.handle, years, months, values, ref_tuple)
        plus = standardize_series(years, months, raw(d.boxes[0]), ref_years, loyo_year)
        minus = standardize_series(years, months, raw(d.boxes[1]), ref_years, loyo_year)
        values = plus - minus

    if d.standardized:
        values = standardize_series(years, months, values, ref_years, loyo_year)
    return IndexSeries(d.handle, years, months, values, ref_tuple)


def compute_indices(fields, registry, ref_years, loyo_year=None, box_cache=None):
    """Evaluate every registry entry in order; returns ``{handle: series}``."""
    computed = {}
    for d in registry:
        computed[d.handle] = compute_index(fields, d, ref_years, loyo_year, computed, box_cache)
    return computed


def write_index_series(series_list, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("handle,year,month,value\n")
        for s in series_list:
            for y, m, v in zip(s.years, s.months, s.values):
                fh.write(f"{s.handle},{int(y)},{int(m)},{'NA' if not np.isfinite(v) else repr(float(v))}\n")


def load_index_series(path):
    """Read ``handle,year,month,value`` rows; returns ``{handle: series}``
    in first-appearance order."""
    import csv

    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:4] != ["handle", "year", "month", "value"]:
            raise ParseError("header must be handle,year,month,value", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            try:
                y, m = int(row[1]), int(row[2])
                v = math.nan if row[3].strip() == "NA" else float(row[3])
            except ValueError:
                raise ParseError("bad number", lineno) from None
            bucket = rows.setdefault(row[0].strip(), {})
            if (y, m) in bucket:
                raise ParseError(f"duplicate {row[0]} {y}-{m}", lineno)
            bucket[(y, m)] = v
    out = {}
    for handle, bucket in rows.items():
        keys = sorted(bucket)
        out[handle] = IndexSeries(handle, [k[0] for k in keys], [k[1] for k in keys], [bucket[k] for k in keys])
    return out


# ---------------------------------------------------------------------------
# Pre-selection


def eof_alphas(loading_variances):
    """Per-EOF significance levels; their squares sum to ``0.1**2``."""
    lam = np.asarray(loading_variances, dtype=float)
    total = lam.sum()
    if total <= 0:
        return np.full(lam.shape, ALPHA_BUDGET / math.sqrt(lam.size))
    return ALPHA_BUDGET * np.sqrt(lam / total)


def correlation_pvalue(rho, n, test="t"):
    """Two-sided p-value for H0: rho = 0 from ``n`` pairs."""
    rho = float(np.clip(rho, -1.0, 1.0))
    if test == "fisher":
        if abs(rho) == 1.0:
            return 0.0
        z = math.atanh(rho) * math.sqrt(n - 3)
        return float(2 * norm_sf(abs(z)))
    if abs(rho) == 1.0:
        return 0.0
    t = rho * math.sqrt(n - 2) / math.sqrt(1 - rho * rho)
    return float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class PredictorScreen:
    predictor: str
    rho: np.ndarray
    p_values: np.ndarray
    alphas: np.ndarray
    retained: bool
    reason: str = ""


@dataclass
class PreselectionReport:
    entries: list

    @property
    def retained(self):
        return [e.predictor for e in self.entries if e.retained]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("predictor,eof_index,rho,p_value,alpha,retained\n")
            for e in self.entries:
                for i in range(len(e.alphas)):
                    rho = "NA" if not np.isfinite(e.rho[i]) else repr(float(e.rho[i]))
                    p = "NA" if not np.isfinite(e.p_values[i]) else repr(float(e.p_values[i]))
                    fh.write(f"{e.predictor},{i + 1},{rho},{p},{float(e.alphas[i])!r},{int(e.retained)}\n")


def preselect(predictors, loadings, loading_variances, test="t") -> PreselectionReport:
    """Keep predictors significantly correlated with at least one loading.

    ``predictors`` maps names to per-year values aligned with the rows of
    ``loadings`` (years x k).
    """
    loadings = np.asarray(loadings, dtype=float)
    if loadings.ndim == 1:
        loadings = loadings[:, None]
    k = loadings.shape[1]
    if k < 1:
        raise ConfigurationError("need at least one EOF")
    alphas = eof_alphas(loading_variances)
    entries = []
    for name, values in predictors.items():
        x = np.asarray(values, dtype=float)
        ok = np.isfinite(x) & np.isfinite(loadings).all(axis=1)
        n = int(ok.sum())
        if n < 6:
            raise ConfigurationError(f"{name}: only {n} common years, need 6")
        xs = x[ok] - x[ok].mean()
        if np.all(xs == 0):
            entries.append(PredictorScreen(name, np.full(k, np.nan), np.full(k, np.nan), alphas, False, "zero variance"))
            continue
        rho = np.full(k, np.nan)
        pv = np.ones(k)
        for i in range(k):
            a = loadings[ok, i] - loadings[ok, i].mean()
            denom = math.sqrt(float(xs @ xs) * float(a @ a))
            if denom == 0:
                continue
            rho[i] = float(xs @ a) / denom
            pv[i] = correlation_pvalue(rho[i], n, test)
        retained = bool(np.any(pv <= alphas))
        entries.append(PredictorScreen(name, rho, pv, alphas, retained, "" if retained else "not significant"))
    return PreselectionReport(entries)


# ---------------------------------------------------------------------------
# Features


def trend_value(year):
    return (year - 2000) / 10


@dataclass
class FeatureTable:
    years: np.ndarray
    names: list
    raw: np.ndarray  # (n_years, d) before scaling
    mean: np.ndarray
    scale: np.ndarray
    provenance: list
    training_years: np.ndarray
    candidates: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # (name, reason)

    @property
    def X(self):
        return self.apply_scaling(self.raw)

    def apply_scaling(self, raw):
        return (np.asarray(raw, dtype=float) - self.mean) / self.scale

    def unscale(self, X):
        return np.asarray(X, dtype=float) * self.scale + self.mean

    def rows(self, years):
        pos = {int(y): i for i, y in enumerate(self.years)}
        return np.array([pos[int(y)] for y in years], dtype=np.int64)

    def design(self, years):
        return self.X[self.rows(years)]


def _candidate_columns(predictors, years, include_interactions):
    names, cols, prov = [], [], []
    base = list(predictors)
    for v in base:
        names.append(v)
        cols.append(np.asarray(predictors[v], dtype=float))
        prov.append(("base",))
    if include_interactions:
        for u in base:
            uu = np.asarray(predictors[u], dtype=float)
            for v in base:
                vv = np.asarray(predictors[v], dtype=float)
                names.append(f"{v}*[{u}<0]")
                cols.append(vv * (uu < 0))
                prov.append(("interaction", u, v, "below"))
                names.append(f"{v}*[{u}>0]")
                cols.append(vv * (uu > 0))
                prov.append(("interaction", u, v, "above"))
    names.append(TREND)
    cols.append(trend_value(np.asarray(years, dtype=float)))
    prov.append(("trend",))
    return names, np.column_stack(cols), prov


def build_features(predictors, include_interactions, years, training_years) -> FeatureTable:
    """Assemble and scale the design matrix.

    ``predictors`` maps names (in registry order) to values aligned with
    ``years``. Columns: base predictors, then ``v * 1{u < 0}`` and
    ``v * 1{u > 0}`` for every ordered pair ``(u, v)`` when interactions
    are on, then the trend ``(year - 2000) / 10``. Columns other than the
    trend are standardized over ``training_years``; the trend is only
    centred. Constant and exactly duplicated columns (over the training
    years) are dropped, keeping the earliest.
    """
    years = np.asarray(years, dtype=np.int64)
    names, raw, prov = _candidate_columns(predictors, years, include_interactions)
    if not np.all(np.isfinite(raw)):
        raise ConfigurationError("predictor values must be available for all years")
    train = np.isin(years, np.asarray(list(training_years), dtype=np.int64))
    rt = raw[train]
    mean = rt.mean(axis=0)
    scale = rt.std(axis=0, ddof=1)
    is_trend = np.array([p[0] == "trend" for p in prov])

    keep, dropped = [], []
    scaled_kept = []
    for c, name in enumerate(names):
        if scale[c] == 0 or not np.isfinite(scale[c]):
            dropped.append((name, "constant over training years"))
            log.warning("dropping constant feature %s", name)
            continue
        col = (rt[:, c] - mean[c]) / (1.0 if is_trend[c] else scale[c])
        dup = None
        for kc, kcol in zip(keep, scaled_kept):
            if is_trend[kc] != is_trend[c]:
                continue
            if np.max(np.abs(col - kcol)) <= 1e-10 or np.max(np.abs(col + kcol)) <= 1e-10:
                dup = names[kc]
                break
        if dup is not None:
            dropped.append((name, f"duplicate of {dup}"))
            continue
        keep.append(c)
        scaled_kept.append(col)

    keep = np.array(keep, dtype=np.int64)
    scale = np.where(is_trend, 1.0, scale)
    return FeatureTable(
        years=years,
        names=[names[c] for c in keep],
        raw=raw[:, keep],
        mean=mean[keep],
        scale=scale[keep],
        provenance=[prov[c] for c in keep],
        training_years=years[train],
        candidates=names,
        dropped=dropped,
    )


def raw_feature_vector(table: FeatureTable, predictor_values):
    """Raw feature vector for one year on ``table``'s roster.

    ``predictor_values`` maps base predictor names to scalars; it must
    carry ``year`` as well for the trend column.
    """
    out = []
    for name, prov in zip(table.names, table.provenance):
        try:
            if prov[0] == "base":
                out.append(predictor_values[name])
            elif prov[0] == "trend":
                out.append(trend_value(predictor_values["year"]))
            else:
                _, u, v, state = prov
                uu = predictor_values[u]
                on = uu < 0 if state == "below" else uu > 0
                out.append(predictor_values[v] * on)
        except KeyError as exc:
            raise FeatureMismatchError(f"missing predictor {exc.args[0]!r} for feature {name}") from None
    return np.array(out, dtype=float)

"""Leave-one-year-out experiments and full-fit diagnostics.

Every fold rebuilds anomalies, the transform, EOFs, index
standardization, pre-selection, feature scaling and the cross-validated
fit from its training years alone. Full-fit runs call the same routine
with all reference years and no held-out year.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, format_years
from .eof import EofBasis, compute_eofs, write_basis
from .errors import ConfigurationError, ForecastError, ValidationError
from .features import (
    IndexSeries,
    PreselectionReport,
    build_features,
    compute_index,
    compute_indices,
    load_index_series,
    load_registry,
    preselect,
    standardize_series,
    write_index_series,
)
from .gauss_transform import fit_transform_model, transform
from .grids import (
    CategoryStack,
    GridStack,
    Mask,
    aggregate_grid,
    compute_anomalies,
    csv_has_column,
    dry_mask,
    infer_grid_spec,
    load_grid_stack,
    load_mask,
    load_monthly_stack,
    seasonal_total,
    tercile_categories,
    write_categories,
    write_mask,
)
from .mtnet import CONSTANTS, MultiTaskFit, fit_multitask, predict_loadings
from .tercile import LoadingForecast, TercileField, tercile_from_gaussian, write_terciles
from .verify import PRNG_STREAM, BootstrapSummary, ScoreReport, aggregate_scores, bootstrap_scores

log = logging.getLogger(__name__)

LOYO_OUTPUTS = (
    "forecasts.csv",
    "observed_categories.csv",
    "mask.csv",
    "folds.csv",
    "scores_map.csv",
    "scores_yearly.csv",
    "bootstrap.csv",
    "bootstrap_summary.txt",
    "manifest.json",
)
FULLFIT_OUTPUTS = (
    "eof_patterns.csv",
    "eof_variances.csv",
    "eof_cells.csv",
    "eof_loadings.csv",
    "preselection.csv",
    "coefficients.csv",
    "selection.csv",
    "fit_metadata.txt",
    "manifest.json",
)
FOLD_ERRORS = (ForecastError, ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Inputs


class PredictorSource:
    """Per-fold predictor values at the configured month.

    Built either from predictor fields plus the index registry, or from an
    index-series CSV whose series are re-standardized per calendar month
    over each fold's training years.
    """

    def __init__(self, registry, fields=None, series=None):
        if fields is None and series is None:
            raise ConfigurationError("need predictor fields or index series")
        self.fields = fields
        self.series = series
        self.box_cache = {}
        if fields is not None:
            self.registry = _available(registry, set(fields))
        else:
            self.registry = _available(registry, set(), have=set(series))
            extra = [h for h in series if h not in {d.handle for d in self.registry}]
            self.extra = extra
        if fields is not None:
            self.extra = []
            # raw box means once; folds only restandardize
            compute_indices(fields, self.registry, self._all_years(), None, self.box_cache)

    def _all_years(self):
        stack = next(iter(self.fields.values()))
        return sorted(set(int(y) for y in stack.years))

    @property
    def names(self):
        return [d.handle for d in self.registry] + list(self.extra)

    def indices(self, ref_years, loyo_year=None):
        """``{handle: IndexSeries}`` standardized over ``ref_years`` minus
        ``loyo_year`` (both in predictor-year space)."""
        if self.fields is not None:
            return compute_indices(self.fields, self.registry, ref_years, loyo_year, self.box_cache)
        computed = {}
        for handle, s in self.series.items():
            vals = standardize_series(s.years, s.months, s.values, ref_years, loyo_year)
            computed[handle] = IndexSeries(handle, s.years, s.months, vals, tuple(ref_years))
        out = {}
        for d in self.registry:
            if d.handle in computed:
                out[d.handle] = computed[d.handle]
            else:
                out[d.handle] = compute_index(None, d, ref_years, loyo_year, {**computed, **out})
        for h in self.extra:
            out[h] = computed[h]
        return out


def _available(registry, variables, have=frozenset()):
    """Registry entries computable from ``variables`` or present in ``have``."""
    ok, known = [], set(have)
    for d in registry:
        if d.handle in have:
            ok.append(d)
        elif d.formula in ("box_mean", "box_difference") and d.source_variable in variables:
            ok.append(d)
            known.add(d.handle)
        elif d.formula in ("composite", "diff") and all(h in known for h in d.depends_on):
            ok.append(d)
            known.add(d.handle)
        else:
            log.info("index %s not computable from the inputs; skipped", d.handle)
    return ok


@dataclass
class Dataset:
    totals: GridStack
    predictors: PredictorSource
    mask: Mask | None = None
    checksums: dict = field(default_factory=dict)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_totals(path, season, factor=1):
    spec = infer_grid_spec(path)
    if csv_has_column(path, "month"):
        totals = seasonal_total(load_monthly_stack(path, spec), season)
    else:
        totals = load_grid_stack(path, spec, "total")
    if factor > 1:
        totals = aggregate_grid(totals, factor)
    return totals


def load_predictors(config: ExperimentConfig) -> PredictorSource:
    """Predictor fields take precedence over an index-series CSV."""
    inputs = config.inputs
    registry = load_registry(inputs.get("registry"))
    field_vars = [v for v in ("sst", "u850", "u200") if v in inputs]
    if field_vars:
        fields = {v: load_monthly_stack(inputs[v], infer_grid_spec(inputs[v])) for v in field_vars}
        return PredictorSource(registry, fields=fields)
    if "indices" in inputs:
        return PredictorSource(registry, series=load_index_series(inputs["indices"]))
    raise ConfigurationError("inputs need predictor fields (sst/u850/u200) or indices")


def load_observations(config: ExperimentConfig) -> GridStack:
    if "precip" not in config.inputs:
        raise ConfigurationError("inputs.precip is required")
    return load_totals(config.inputs["precip"], config.season, config.resolution_factor)


def load_dataset(config: ExperimentConfig) -> Dataset:
    inputs = config.inputs
    totals = load_observations(config)
    predictors = load_predictors(config)
    mask = load_mask(inputs["mask"], totals.spec) if "mask" in inputs else None
    checksums = {k: _sha256(v) for k, v in sorted(inputs.items()) if k != "members"}
    return Dataset(totals, predictors, mask, checksums)


def dataset_from_synthetic(ds, registry=None) -> Dataset:
    """In-memory dataset from a :class:`~seasonal_ml.synthetic.SyntheticDataset`."""
    registry = load_registry() if registry is None else registry
    return Dataset(ds.totals, PredictorSource(registry, fields=ds.fields))


# ---------------------------------------------------------------------------
# One fold


@dataclass
class FoldModel:
    training_years: np.ndarray
    basis: EofBasis
    preselection: PreselectionReport
    feature_names: list
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    fit: MultiTaskFit
    transform_sigma: np.ndarray

    def digest(self):
        """Hash of everything estimated from the training years."""
        h = hashlib.sha256()
        for arr in (
            self.training_years,
            self.transform_sigma,
            self.basis.patterns,
            self.basis.loadings,
            self.basis.loading_variances,
            self.basis.resid_sq,
            self.feature_mean,
            self.feature_scale,
            self.fit.coef,
            self.fit.cov,
            np.array([self.fit.df, self.fit.params.lambda1, self.fit.params.lambda2]),
        ):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        for e in self.preselection.entries:
            h.update(e.predictor.encode())
            h.update(np.ascontiguousarray(e.rho, dtype=float).tobytes())
        h.update("|".join(self.feature_names).encode())
        return h.hexdigest()


@dataclass
class FoldResult:
    year: int
    status: str
    reason: str = ""
    forecast: TercileField | None = None
    model: FoldModel | None = None
    seconds: float = 0.0

    def summary(self):
        out = {"year": self.year, "status": self.status, "reason": self.reason, "seconds": round(self.seconds, 4)}
        if self.model is not None:
            fit = self.model.fit
            out.update(
                retained=self.model.preselection.retained,
                features=self.model.feature_names,
                active=[n for n, a in zip(self.model.feature_names, fit.active) if a],
                lambda1=fit.params.lambda1,
                lambda2=fit.params.lambda2,
                df=fit.df,
                sweeps=fit.sweeps,
                digest=self.model.digest(),
            )
        return out


def predictor_table(config, source: PredictorSource, years, ref_years, loyo_year=None):
    """Per-year predictor values for season ``years`` at the predictor month."""
    off = config.predictor_year_offset
    ref_p = [int(y) + off for y in ref_years]
    loyo_p = None if loyo_year is None else int(loyo_year) + off
    series = source.indices(ref_p, loyo_p)
    pyears = [int(y) + off for y in years]
    return {h: s.at_month(config.predictor_month, pyears) for h, s in series.items()}


def fit_fold(config, data: Dataset, training_years, target_year=None):
    """Everything estimated from ``training_years``; ``target_year`` only
    contributes its predictor values to the returned feature row."""
    train = sorted(int(y) for y in training_years)
    totals = data.totals.subset(train)
    anomalies = compute_anomalies(totals, train)
    tmodel = fit_transform_model(anomalies, train)
    z = transform(tmodel, anomalies)
    basis = compute_eofs(z, train, config.k, sigma=tmodel.sigma)

    years = train if target_year is None else sorted(set(train) | {int(target_year)})
    ref = sorted(set(int(y) for y in config.ref_years) | set(train))
    values = predictor_table(config, data.predictors, years, ref, target_year)
    rows = np.isin(years, train)
    usable = {h: v for h, v in values.items() if np.all(np.isfinite(v))}
    dropped = sorted(set(values) - set(usable))
    if dropped:
        log.info("predictors without values for every year: %s", ", ".join(dropped))
    report = preselect({h: v[rows] for h, v in usable.items()}, basis.loadings, basis.loading_variances,
                       config.correlation_test)
    retained = {h: usable[h] for h in report.retained}
    table = build_features(retained, config.interactions, years, train)
    X = table.design(train)
    fit = fit_multitask(X, basis.loadings, train, config.mode, table.names, table.mean, table.scale)
    model = FoldModel(np.array(train), basis, report, table.names, table.mean, table.scale, fit, tmodel.sigma)
    return model, table


def run_fold(config, data: Dataset, year):
    t0 = time.perf_counter()
    train = [y for y in config.ref_years if int(y) != int(year)]
    try:
        model, table = fit_fold(config, data, train, year)
        x = table.raw[table.rows([year])[0]]
        mean = predict_loadings(model.fit, x)
        forecast = tercile_from_gaussian(LoadingForecast(int(year), mean, model.fit.cov), model.basis)
    except FOLD_ERRORS as exc:
        log.warning("fold %s failed: %s", year, exc)
        return FoldResult(int(year), "failed", f"{type(exc).__name__}: {exc}", seconds=time.perf_counter() - t0)
    return FoldResult(int(year), "ok", "", forecast, model, time.perf_counter() - t0)


# worker-process state, set once per process
_WORKER = {}


def _init_worker(config, data):
    _WORKER["config"], _WORKER["data"] = config, data


def _worker_fold(year):
    return run_fold(_WORKER["config"], _WORKER["data"], year)


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class LoyoResult:
    config: ExperimentConfig
    folds: list
    forecasts: list
    observed: CategoryStack
    mask: Mask
    scores: ScoreReport | None
    bootstrap: BootstrapSummary | None
    manifest: dict

    @property
    def partial(self):
        return any(f.status != "ok" for f in self.folds)

    @property
    def mbss(self):
        return None if self.scores is None else self.scores.mbss


def check_output(out, names, force):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise ConfigurationError(f"{out} already holds {', '.join(clash)}; use --force to overwrite")
    return out


def _check_years(config, data):
    have = set(int(y) for y in data.totals.years)
    missing = sorted(set(config.ref_years) - have)
    if missing:
        raise ConfigurationError(f"no observations for reference years {format_years(missing)}")


def _manifest(config, data, kind, extra):
    return {
        "kind": kind,
        "config": config.to_dict(),
        "software": {"package": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "solver_constants": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(CONSTANTS).items()},
        "input_checksums": data.checksums,
        **extra,
    }


def run_loyo(config: ExperimentConfig, data: Dataset | None = None, write=True, force=False) -> LoyoResult:
    t_start = time.perf_counter()
    if data is None:
        data = load_dataset(config)
    _check_years(config, data)
    out = check_output(config.out, LOYO_OUTPUTS, force) if write else None

    years = [int(y) for y in config.eval_years]
    if config.workers > 1 and len(years) > 1:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(config, data)) as ex:
            folds = list(ex.map(_worker_fold, years))
    else:
        folds = [run_fold(config, data, y) for y in years]

    forecasts = [f.forecast for f in folds if f.status == "ok"]
    obs_years = sorted(set(config.ref_years) | (set(years) & set(int(y) for y in data.totals.years)))
    totals = data.totals.subset(obs_years)
    observed = tercile_categories(totals, config.ref_years, exclude_target=True)
    mask = data.mask if data.mask is not None else dry_mask(totals, config.ref_years, config.drop_fraction)

    scores = boot = None
    if forecasts:
        scores = aggregate_scores(forecasts, observed, mask)
        boot = bootstrap_scores(scores.year_mbs_model, config.n_resamples, config.seed)
    elif years:
        log.error("every fold failed")

    manifest = _manifest(
        config,
        data,
        "loyo",
        {
            "folds": [f.summary() for f in folds],
            "partial": any(f.status != "ok" for f in folds),
            "mbss": None if scores is None else scores.mbss,
            "bootstrap_stream": PRNG_STREAM,
            "seconds": round(time.perf_counter() - t_start, 3),
        },
    )
    result = LoyoResult(config, folds, forecasts, observed, mask, scores, boot, manifest)
    if write:
        write_loyo(result, out)
    return result


def write_loyo(result: LoyoResult, out):
    out = Path(out)
    write_terciles(result.forecasts, out / "forecasts.csv")
    write_categories(result.observed, out / "observed_categories.csv")
    write_mask(result.mask, out / "mask.csv")
    with open(out / "folds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "status", "n_retained", "n_features", "n_active", "lambda1", "lambda2", "df", "active", "reason"])
        for f in result.folds:
            s = f.summary()
            if f.model is None:
                w.writerow([f.year, f.status, "", "", "", "", "", "", "", f.reason])
                continue
            w.writerow([
                f.year, f.status, len(s["retained"]), len(s["features"]), len(s["active"]),
                repr(s["lambda1"]), repr(s["lambda2"]), repr(s["df"]), ";".join(s["active"]), "",
            ])
    if result.scores is not None:
        result.scores.write(out, result.mask.spec)
        result.bootstrap.write(out)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class FullFitResult:
    config: ExperimentConfig
    model: FoldModel
    manifest: dict


def run_full_fit(config: ExperimentConfig, data: Dataset | None = None, write=True, force=False) -> FullFitResult:
    t_start = time.perf_counter()
    if data is None:
        data = load_dataset(config)
    _check_years(config, data)
    out = check_output(config.out, FULLFIT_OUTPUTS, force) if write else None
    model, _ = fit_fold(config, data, config.ref_years)
    fit = model.fit
    manifest = _manifest(
        config,
        data,
        "fullfit",
        {
            "retained": model.preselection.retained,
            "features": model.feature_names,
            "fit": {k: v for k, v in fit.metadata().items() if k != "constants"},
            "digest": model.digest(),
            "seconds": round(time.perf_counter() - t_start, 3),
        },
    )
    result = FullFitResult(config, model, manifest)
    if write:
        write_basis(model.basis, out)
        model.preselection.write(out / "preselection.csv")
        fit.write_report(out / "coefficients.csv")
        fit.write_selection(out / "selection.csv")
        meta = fit.metadata()
        lines = [f"{k}={meta[k]!r}" for k in ("df", "active_size", "sweeps", "lambda1", "lambda2", "mode")]
        (out / "fit_metadata.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def config_from_manifest(path, out=None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = ExperimentConfig.from_dict(manifest["config"])
    return config.with_overrides(out=out)


def replay(path, out=None, force=False):
    """Re-run the experiment recorded in a manifest."""
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = ExperimentConfig.from_dict(manifest["config"]).with_overrides(out=out)
    data = load_dataset(config)
    if manifest.get("input_checksums") and manifest["input_checksums"] != data.checksums:
        raise ValidationError("input files differ from the ones recorded in the manifest")
    runner = run_loyo if manifest["kind"] == "loyo" else run_full_fit
    return runner(config, data, force=force)


def write_indices(config: ExperimentConfig, data: Dataset, path):
    """Index series over the reference years, without a held-out year."""
    off = config.predictor_year_offset
    series = data.predictors.indices([y + off for y in config.ref_years])
    write_index_series(list(series.values()), path)
    return series


__all__ = [
    "Dataset",
    "FoldModel",
    "FoldResult",
    "FullFitResult",
    "LoyoResult",
    "PredictorSource",
    "check_output",
    "config_from_manifest",
    "dataset_from_synthetic",
    "fit_fold",
    "load_dataset",
    "load_observations",
    "load_predictors",
    "load_totals",
    "replay",
    "run_fold",
    "run_full_fit",
    "run_loyo",
    "write_indices",
    "write_loyo",
]

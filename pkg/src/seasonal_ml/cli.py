"""Command-line interface; every pipeline stage is its own subcommand.

Exit codes: 0 success, 2 partial (some folds failed), 1 fatal.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config

log = logging.getLogger("seasonal_ml")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _common(p):
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--season", choices=("jf", "mam", "jjas", "ond"))
    p.add_argument("--mode", choices=("lasso", "en_fixed", "en_opt"))
    p.add_argument("--interactions", choices=("on", "off"))
    p.add_argument("--resolution-factor", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="seasonal-ml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "seasonal totals, anomalies, observed categories and dry mask",
        "transform": "Gaussianized anomalies over the reference years",
        "eof": "EOF patterns, variances and loadings",
        "indices": "climate index series at every month",
        "preselect": "predictor pre-selection report",
        "fit": "cross-validated regression on all reference years",
        "predict": "tercile forecasts for chosen years",
        "ensemble-terciles": "tercile probabilities from ensemble members",
        "evaluate": "scores and bootstrap for a forecast CSV",
        "loyo": "leave-one-year-out hindcast experiment",
        "fullfit": "full-period fit with all diagnostics",
        "synth": "write a synthetic dataset with a ready-to-run config",
    }
    cmds = {name: sub.add_parser(name, help=text) for name, text in helps.items()}
    for p in cmds.values():
        _common(p)
    cmds["predict"].add_argument("--year", type=int, action="append", help="target year (repeatable)")
    cmds["predict"].add_argument("--pgm", action="store_true", help="also write PGM rasters")
    cmds["evaluate"].add_argument("--forecasts", type=Path, help="tercile CSV (default OUT/forecasts.csv)")
    cmds["loyo"].add_argument("--replay", type=Path, help="re-run the experiment recorded in a manifest")
    cmds["synth"].add_argument("--null", action="store_true", help="no index signal in the loadings")
    cmds["synth"].add_argument("--members", type=int, default=0, help="ensemble members to write")
    cmds["synth"].add_argument("--no-fields", action="store_true", help="index CSV instead of predictor fields")
    cmds["synth"].add_argument("--n-lat", type=int, default=20)
    cmds["synth"].add_argument("--n-lon", type=int, default=20)
    return parser


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return config.with_overrides(
        season=args.season,
        mode=args.mode,
        interactions=None if args.interactions is None else args.interactions == "on",
        resolution_factor=args.resolution_factor,
        seed=args.seed,
        workers=args.workers,
        out=None if args.out is None else str(args.out),
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(config, args):
    from .experiment import check_output, load_observations
    from .grids import compute_anomalies, dry_mask, load_mask, tercile_categories, write_categories
    from .grids import write_grid_stack, write_mask

    out = check_output(config.out, ("totals.csv", "anomalies.csv", "categories.csv", "mask.csv"), args.force)
    totals = load_observations(config)
    write_grid_stack(totals, out / "totals.csv")
    write_grid_stack(compute_anomalies(totals, config.ref_years), out / "anomalies.csv")
    write_categories(tercile_categories(totals, config.ref_years), out / "categories.csv")
    if "mask" in config.inputs:
        mask = load_mask(config.inputs["mask"], totals.spec)
    else:
        mask = dry_mask(totals, config.ref_years, config.drop_fraction)
    write_mask(mask, out / "mask.csv")
    return EXIT_OK


def _transformed(config):
    from .experiment import load_observations
    from .gauss_transform import fit_transform_model, transform
    from .grids import compute_anomalies

    totals = load_observations(config)
    anomalies = compute_anomalies(totals, config.ref_years)
    model = fit_transform_model(anomalies, config.ref_years)
    return transform(model, anomalies), model


def cmd_transform(config, args):
    from .experiment import check_output
    from .gauss_transform import write_transformed

    out = check_output(config.out, ("transformed.csv", "transformed.csv.meta"), args.force)
    z, model = _transformed(config)
    write_transformed(z, model, out / "transformed.csv")
    return EXIT_OK


def cmd_eof(config, args):
    from .eof import compute_eofs, write_basis
    from .experiment import check_output

    names = ("eof_patterns.csv", "eof_variances.csv", "eof_cells.csv", "eof_loadings.csv")
    out = check_output(config.out, names, args.force)
    z, model = _transformed(config)
    write_basis(compute_eofs(z, config.ref_years, config.k, sigma=model.sigma), out)
    return EXIT_OK


def cmd_indices(config, args):
    from .experiment import Dataset, check_output, load_predictors, write_indices

    out = check_output(config.out, ("indices.csv",), args.force)
    write_indices(config, Dataset(None, load_predictors(config)), out / "indices.csv")
    return EXIT_OK


def cmd_preselect(config, args):
    from .experiment import check_output, run_full_fit

    out = check_output(config.out, ("preselection.csv",), args.force)
    result = run_full_fit(config, write=False)
    result.model.preselection.write(out / "preselection.csv")
    return EXIT_OK


def cmd_fit(config, args):
    from .experiment import check_output, run_full_fit

    out = check_output(config.out, ("coefficients.csv", "selection.csv", "fit_metadata.txt"), args.force)
    fit = run_full_fit(config, write=False).model.fit
    fit.write_report(out / "coefficients.csv")
    fit.write_selection(out / "selection.csv")
    meta = fit.metadata()
    lines = [f"{k}={meta[k]!r}" for k in ("df", "active_size", "sweeps", "lambda1", "lambda2", "mode")]
    (out / "fit_metadata.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_predict(config, args):
    from .errors import ConfigurationError
    from .experiment import check_output, load_dataset, run_fold
    from .tercile import write_pgm, write_terciles

    years = args.year or [y for y in config.eval_years if y not in set(config.ref_years)]
    if not years:
        raise ConfigurationError("no target years; pass --year")
    out = check_output(config.out, ("predictions.csv",), args.force)
    data = load_dataset(config)
    folds = [run_fold(config, data, y) for y in years]
    forecasts = [f.forecast for f in folds if f.status == "ok"]
    write_terciles(forecasts, out / "predictions.csv")
    if args.pgm:
        for f in forecasts:
            for channel in ("below", "normal", "above"):
                write_pgm(f, channel, out / f"forecast_{f.year}_{channel}.pgm")
    for f in folds:
        if f.status != "ok":
            log.error("year %s failed: %s", f.year, f.reason)
    return EXIT_OK if len(forecasts) == len(folds) else (EXIT_PARTIAL if forecasts else EXIT_FATAL)


def cmd_ensemble(config, args):
    from .errors import ConfigurationError
    from .experiment import check_output, load_totals
    from .tercile import tercile_from_ensemble, write_terciles

    if "members" not in config.inputs:
        raise ConfigurationError("inputs.members lists the ensemble member files")
    out = check_output(config.out, ("ensemble_forecasts.csv",), args.force)
    paths = [p for p in config.inputs["members"].split(",") if p]
    members = [load_totals(p, config.season, config.resolution_factor) for p in paths]
    fields = [tercile_from_ensemble(members, config.ref_years, y, exclude_target=True) for y in config.eval_years]
    write_terciles(fields, out / "ensemble_forecasts.csv")
    return EXIT_OK


def cmd_evaluate(config, args):
    from .experiment import check_output, load_observations
    from .grids import dry_mask, load_mask, tercile_categories
    from .tercile import load_terciles
    from .verify import aggregate_scores, bootstrap_scores

    path = args.forecasts or Path(config.out) / "forecasts.csv"
    names = ("scores_map.csv", "scores_yearly.csv", "bootstrap.csv", "bootstrap_summary.txt")
    out = check_output(config.out, names, args.force)
    totals = load_observations(config)
    forecasts = load_terciles(path, totals.spec)
    years = sorted(set(config.ref_years) | {f.year for f in forecasts})
    totals = totals.subset([y for y in years if y in set(int(t) for t in totals.years)])
    observed = tercile_categories(totals, config.ref_years, exclude_target=True)
    if "mask" in config.inputs:
        mask = load_mask(config.inputs["mask"], totals.spec)
    else:
        mask = dry_mask(totals, config.ref_years, config.drop_fraction)
    report = aggregate_scores(forecasts, observed, mask)
    report.write(out, totals.spec)
    bootstrap_scores(report.year_mbs_model, config.n_resamples, config.seed).write(out)
    print(f"MBSS {report.mbss:.4f}")
    return EXIT_OK


def cmd_loyo(config, args):
    from .experiment import replay, run_loyo

    if args.replay:
        result = replay(args.replay, out=None if args.out is None else str(args.out), force=args.force)
    else:
        result = run_loyo(config, force=args.force)
    if result.scores is None:
        log.error("no fold produced a forecast")
        return EXIT_FATAL
    b = result.bootstrap.mbss_percentiles
    print(f"MBSS {result.mbss:.4f} (bootstrap 5-95%: {b[5.0]:.4f} to {b[95.0]:.4f})")
    return EXIT_PARTIAL if result.partial else EXIT_OK


def cmd_fullfit(config, args):
    from .experiment import run_full_fit

    result = run_full_fit(config, force=args.force)
    print(f"retained: {', '.join(result.model.preselection.retained) or '-'}")
    return EXIT_OK


def cmd_synth(config, args):
    from .errors import ConfigurationError
    from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic

    if args.out is None:
        raise ConfigurationError("synth needs --out")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigurationError(f"{out} is not empty; use --force to overwrite")
    spec = SyntheticSpec(n_lat=args.n_lat, n_lon=args.n_lon, signal=not args.null, n_members=args.members)
    ds = generate_synthetic(spec, seed=config.seed)
    path = write_synthetic(ds, out, with_fields=not args.no_fields)
    print(path)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "transform": cmd_transform,
    "eof": cmd_eof,
    "indices": cmd_indices,
    "preselect": cmd_preselect,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "ensemble-terciles": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "loyo": cmd_loyo,
    "fullfit": cmd_fullfit,
    "synth": cmd_synth,
}


def main(argv=None):
    from .errors import ForecastError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config, args)
    except (ForecastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())

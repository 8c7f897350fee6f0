import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from seasonal_ml import experiment
from seasonal_ml.config import ExperimentConfig, load_config
from seasonal_ml.errors import ConfigurationError, NumericalError, ValidationError
from seasonal_ml.experiment import (
    LOYO_OUTPUTS,
    Dataset,
    PredictorSource,
    dataset_from_synthetic,
    fit_fold,
    replay,
    run_full_fit,
    run_loyo,
)
from seasonal_ml.features import load_registry
from seasonal_ml.grids import GridStack, MonthlyStack
from seasonal_ml.synthetic import SyntheticSpec, generate_synthetic, write_synthetic

CFG = ExperimentConfig(k=3, predictor_month=7)
NULL = replace(SyntheticSpec(), signal=False)


def _data(seed=0, spec=SyntheticSpec()):
    return dataset_from_synthetic(generate_synthetic(spec, seed))


def _perturbed(ds, year, seed):
    """Copy of ``ds`` with every observation and predictor value of
    ``year`` replaced by arbitrary numbers."""
    rng = np.random.default_rng(seed)
    tot = ds.totals.values.copy()
    t = list(ds.totals.years).index(year)
    tot[t] = rng.uniform(1.0, 5000.0, tot[t].shape)
    fields = {}
    for var, st in ds.fields.items():
        vals = st.values.copy()
        rows = st.years == year
        vals[rows] = rng.normal(0.0, 50.0, vals[rows].shape)
        fields[var] = MonthlyStack(st.spec, st.years, st.months, vals)
    return Dataset(GridStack(ds.totals.spec, ds.totals.years, tot, "total"),
                   PredictorSource(load_registry(), fields=fields))


# -- fold hygiene -----------------------------------------------------------------------


@pytest.mark.parametrize("year", [1993, 2005, 2020])
def test_left_out_year_cannot_leak(year):
    ds = generate_synthetic(seed=4)
    train = [y for y in CFG.ref_years if y != year]
    clean, table = fit_fold(CFG, dataset_from_synthetic(ds), train, year)
    dirty, dtable = fit_fold(CFG, _perturbed(ds, year, 1), train, year)
    assert clean.digest() == dirty.digest()
    assert np.array_equal(clean.fit.coef, dirty.fit.coef)
    # the perturbation reached the target row of the design
    row = table.rows([year])[0]
    assert not np.array_equal(table.raw[row], dtable.raw[row])


def test_full_fit_and_fold_share_one_routine():
    data = _data(1)
    full = run_full_fit(CFG, data, write=False)
    model, _ = fit_fold(CFG, data, CFG.ref_years)
    assert full.model.digest() == model.digest()


# -- determinism and replay ---------------------------------------------------------------


def test_two_runs_are_byte_identical(tmp_path):
    data = _data(2)
    a = run_loyo(CFG.with_overrides(out=str(tmp_path / "a")), data)
    run_loyo(CFG.with_overrides(out=str(tmp_path / "b")), _data(2))
    assert a.bootstrap is not None and len(a.bootstrap.means) == 1000
    for name in LOYO_OUTPUTS:
        if name == "manifest.json":
            continue
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert [f["digest"] for f in ma["folds"]] == [f["digest"] for f in mb["folds"]]


def test_manifest_replay(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_lat=8, n_lon=8), 5)
    cfg_path = write_synthetic(ds, tmp_path / "data", with_fields=False)
    config = load_config(cfg_path).with_overrides(eval_years=tuple(range(2010, 2021)), out=str(tmp_path / "first"))
    first = run_loyo(config)
    assert first.manifest["config"]["eval_years"] == "2010-2020"
    again = replay(tmp_path / "first" / "manifest.json", out=str(tmp_path / "second"))
    for name in ("forecasts.csv", "scores_yearly.csv", "bootstrap.csv", "folds.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    assert again.mbss == first.mbss
    with open(tmp_path / "data" / "indices.csv", "a", encoding="utf-8") as fh:
        fh.write("\n")
    with pytest.raises(ValidationError):
        replay(tmp_path / "first" / "manifest.json", out=str(tmp_path / "third"))


def test_outputs_are_not_overwritten(tmp_path):
    config = CFG.with_overrides(eval_years=(2019, 2020), out=str(tmp_path))
    run_loyo(config, _data(0))
    with pytest.raises(ConfigurationError):
        run_loyo(config, _data(0))
    run_loyo(config, _data(0), force=True)


# -- partial runs ---------------------------------------------------------------------------


def test_failed_fold_is_recorded_and_run_continues(tmp_path, monkeypatch):
    real = experiment.fit_fold

    def flaky(config, data, training_years, target_year=None):
        if target_year == 2000:
            raise NumericalError("synthetic failure")
        return real(config, data, training_years, target_year)

    monkeypatch.setattr(experiment, "fit_fold", flaky)
    config = CFG.with_overrides(eval_years=(1999, 2000, 2001), out=str(tmp_path))
    result = run_loyo(config, _data(0))
    assert result.partial and result.manifest["partial"]
    assert [f.status for f in result.folds] == ["ok", "failed", "ok"]
    assert "synthetic failure" in result.folds[1].reason
    assert [f.year for f in result.forecasts] == [1999, 2001]
    assert len(result.scores.year_mbs_model) == 2
    with open(tmp_path / "folds.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["ok", "failed", "ok"]
    assert rows[1]["reason"].startswith("NumericalError")
    assert int(rows[0]["n_features"]) >= 1


# -- full-fit diagnostics -------------------------------------------------------------------


def test_coefficient_table_shape(tmp_path):
    result = run_full_fit(CFG.with_overrides(out=str(tmp_path)), _data(3))
    with open(tmp_path / "coefficients.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    names = result.model.feature_names
    assert names[-1] == "trend"
    assert len(names) == len(result.model.preselection.retained) + 1  # interactions off
    assert len(rows) == len(names) * CFG.k
    assert [r["feature"] for r in rows[:: CFG.k]] == names


def _planted_sign_trial(seed):
    spec = SyntheticSpec()
    ds = generate_synthetic(spec, seed)
    model = run_full_fit(CFG, dataset_from_synthetic(ds), write=False).model
    names = model.feature_names
    # recovered EOFs carry an arbitrary order and sign; match each planted
    # pattern to its closest recovered one
    overlap = model.basis.patterns @ ds.truth.patterns.T
    noise = np.asarray(spec.amplitudes) * np.sqrt(spec.n_lat * spec.n_lon) / np.hypot(spec.snr, 1.0)
    for (handle, i), coef in ds.truth.coefficients.items():
        # planted coefficient on the standardized index, in loading units
        planted = coef * ds.truth.indices[handle].std(ddof=1) * spec.snr * noise[i]
        if abs(planted) <= 2 * noise[i]:
            continue
        j = int(np.argmax(np.abs(overlap[:, i])))
        if handle not in names:
            return False
        if np.sign(model.fit.coef[names.index(handle), j]) != np.sign(planted) * np.sign(overlap[j, i]):
            return False
    return True


def test_planted_signs_recovered():
    hits = sum(_planted_sign_trial(seed) for seed in range(50))
    assert hits >= 45, hits


def test_zero_signal_coefficients_mostly_zero():
    zeros = total = 0
    for seed in range(50):
        coef = run_full_fit(CFG, _data(seed, NULL), write=False).model.fit.coef
        zeros += int(np.sum(coef == 0))
        total += coef.size
    assert zeros / total >= 0.8, zeros / total


# -- end to end -----------------------------------------------------------------------------


def test_no_predictors_scores_like_climatology():
    for seed in range(20):
        ds = generate_synthetic(NULL, seed)
        data = Dataset(ds.totals, PredictorSource(load_registry(), series={}))
        result = run_loyo(CFG.with_overrides(seed=seed), data, write=False)
        assert all(f.model.feature_names == ["trend"] for f in result.folds)
        assert abs(result.mbss) <= 0.05, (seed, result.mbss)


def test_planted_signal_is_skilful():
    result = run_loyo(CFG, _data(7), write=False)
    assert not result.partial
    assert result.mbss > 0 and result.bootstrap.mbss_percentiles[5.0] > 0

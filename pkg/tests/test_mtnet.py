import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seasonal_ml.errors import ConfigurationError, ConvergenceError, FeatureMismatchError, ValidationError
from seasonal_ml.mtnet import (
    CONSTANTS,
    HyperParams,
    MultiTaskFit,
    SolverConstants,
    cv_folds,
    cv_select,
    estimate_df,
    estimate_loading_covariance,
    fit_mtnet,
    fit_multitask,
    kkt_violation,
    lambda_grid,
    lambda_max,
    objective,
    predict_loadings,
)


def instance(seed, n=25, d=6, k=3, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    X = (X - X.mean(0)) / X.std(0, ddof=1)
    A = rng.standard_normal((n, k)) * noise
    return X, A - A.mean(0)


# -- solver -------------------------------------------------------------------------


def test_unpenalized_is_least_squares():
    X, A = instance(0, n=30, d=5)
    A = A + X @ np.arange(15.0).reshape(5, 3) / 10
    B, _ = fit_mtnet(X, A, 0.0, 0.0)
    ls = np.linalg.solve(X.T @ X, X.T @ A)
    assert np.allclose(B, ls, rtol=0, atol=1e-8)


def test_two_point_example():
    X = np.array([[1.0], [-1.0]])
    A = np.array([[1.0], [-1.0]])
    B, _ = fit_mtnet(X, A, 2.0, 0.0)
    # brute force over a fine 1-D grid
    grid = np.linspace(-2, 2, 400_001)
    g = (1 - grid) ** 2 + (-1 + grid) ** 2 + 2 * np.abs(grid)
    assert grid[np.argmin(g)] == pytest.approx(0.5, abs=1e-5)
    assert B[0, 0] == pytest.approx(0.5, abs=1e-10)


def test_lambda_max_examples():
    assert lambda_max(np.ones((3, 2)), np.zeros((3, 2))) == 0.0
    X = np.array([[1.0], [0.0]])
    A = np.array([[3.0, 4.0], [0.0, 0.0]])
    assert lambda_max(X, A) == 10.0


@pytest.mark.parametrize("seed", range(5))
def test_lambda_max_boundary(seed):
    X, A = instance(seed)
    lm = lambda_max(X, A)
    B, _ = fit_mtnet(X, A, 1.001 * lm)
    assert np.all(B == 0)
    B, _ = fit_mtnet(X, A, 0.9 * lm)
    assert np.any(B != 0)


def test_full_shrinkage_above_lambda_max():
    X, A = instance(9)
    B, sweeps = fit_mtnet(X, A, 5 * lambda_max(X, A), 3.0)
    assert np.all(B == 0) and sweeps == 1


def test_validation():
    X, A = instance(1)
    X[0, 0] = np.nan
    with pytest.raises(ValidationError):
        fit_mtnet(X, A, 1.0)
    with pytest.raises(ValidationError):
        fit_mtnet(np.ones((1, 2)), np.ones((1, 1)), 1.0)
    with pytest.raises(ValidationError):
        fit_mtnet(np.ones((3, 2)), np.ones((4, 1)), 1.0)
    with pytest.raises(ValidationError):
        fit_mtnet(*instance(1), -1.0)


def test_nonconvergence_is_reported():
    X, A = instance(2)
    tiny = SolverConstants(max_sweeps=1, polish_iters=1000, kkt_tol=0.0)
    with pytest.raises(ConvergenceError) as err:
        fit_mtnet(X, A, 0.01 * lambda_max(X, A), constants=tiny)
    assert err.value.residual > 0 and err.value.sweeps == 1


def test_stalled_descent_is_polished():
    # nearly collinear columns: coordinate descent crawls, the fallback certifies
    rng = np.random.default_rng(3)
    base = rng.standard_normal((27, 3))
    X = np.column_stack([base, base @ [1.0, -0.5, 0.25] + 1e-4 * rng.standard_normal(27)])
    A = rng.standard_normal((27, 2))
    slow = SolverConstants(max_sweeps=50)
    lam = 1e-3 * lambda_max(X, A)
    B, _ = fit_mtnet(X, A, lam, constants=slow)
    scale = max(1.0, 2 * np.sqrt(((X.T @ A) ** 2).sum(axis=1)).max())
    assert kkt_violation(X.T @ X, X.T @ A, B, lam, 0.0) <= slow.kkt_tol * scale


@given(st.integers(0, 100_000), st.floats(0.0, 1.0), st.floats(0.0, 3.0))
def test_rows_shared_and_kkt(seed, frac, lam2):
    X, A = instance(seed % 1000, n=15, d=5, k=3)
    lam1 = frac * lambda_max(X, A)
    B, _ = fit_mtnet(X, A, lam1, lam2)
    nz = B != 0
    assert np.all(nz.all(axis=1) | (~nz).all(axis=1))
    scale = max(1.0, lambda_max(X, A))
    assert kkt_violation(X.T @ X, X.T @ A, B, lam1, lam2) <= CONSTANTS.kkt_tol * scale


@given(st.integers(0, 1000))
def test_debug_mode_monotone(seed):
    X, A = instance(seed, n=12, d=4, k=2)
    lam = 0.2 * lambda_max(X, A)
    B1, _ = fit_mtnet(X, A, lam, 0.5, debug=True)
    B2, _ = fit_mtnet(X, A, lam, 0.5)
    assert np.allclose(B1, B2, atol=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_row_permutation_invariance(seed):
    X, A = instance(seed)
    lam = 0.1 * lambda_max(X, A)
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    B1, _ = fit_mtnet(X, A, lam, 0.3)
    B2, _ = fit_mtnet(X[perm], A[perm], lam, 0.3)
    assert np.allclose(B1, B2, rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_warm_start_matches_cold(seed):
    X, A = instance(seed)
    lm = lambda_max(X, A)
    B = None
    for lam in lambda_grid(lm)[:20]:
        B, _ = fit_mtnet(X, A, lam, 0.5 * lam, warm_start=B)
    cold, _ = fit_mtnet(X, A, lam, 0.5 * lam)
    assert np.allclose(B, cold, atol=1e-7)
    assert objective(X, A, B, lam, 0.5 * lam) == pytest.approx(objective(X, A, cold, lam, 0.5 * lam), rel=1e-10)


# -- cross-validation ----------------------------------------------------------------


def test_fold_assignment():
    years = np.arange(1993, 2020)  # 27 years
    folds = cv_folds(years)
    assert sorted(np.flatnonzero(folds == 0).tolist()) == [0, 1, 10, 11, 20, 21]
    assert set(folds.tolist()) == {0, 1, 2, 3, 4}
    shuffled = years[::-1]
    assert np.array_equal(cv_folds(shuffled), folds[::-1])


def test_lambda_grid():
    g = lambda_grid(2.0)
    assert len(g) == 30 and g[0] == 2.0 and g[-1] == pytest.approx(2e-3, rel=1e-12)
    assert np.all(np.diff(np.log(g)) < 0)


def test_cv_needs_ten_years():
    X, A = instance(0, n=9)
    with pytest.raises(ConfigurationError):
        cv_select(X, A, "lasso", np.arange(9))


def test_cv_modes_and_table():
    X, A = instance(4, n=27)
    years = np.arange(1993, 2020)
    for mode, n_ratio in (("lasso", 1), ("en_fixed", 1), ("en_opt", 4)):
        res = cv_select(X, A, mode, years)
        assert len(res.table) == 30 * n_ratio
        best = min(m for _, _, m in res.table)
        chosen = [m for l1, l2, m in res.table if (l1, l2) == (res.params.lambda1, res.params.lambda2)]
        assert chosen == [best]
        if mode == "lasso":
            assert res.params.lambda2 == 0
        if mode == "en_fixed":
            assert res.params.lambda2 == res.params.lambda1


def test_cv_ties_prefer_strong_regularization():
    # zero response: lambda_max is 0 and the grid collapses
    X, _ = instance(5, n=20)
    A = np.zeros((20, 2))
    res = cv_select(X, A, "lasso", np.arange(20))
    assert res.params.lambda1 == 0.0
    # a response seen by one feature in one fold only: many grid points tie
    A[0, 0] = 1.0
    res = cv_select(np.zeros((20, 3)) + np.eye(20, 3), A, "en_opt", np.arange(20))
    top = [r for r in res.table if r[2] == min(t[2] for t in res.table)]
    assert (res.params.lambda1, res.params.lambda2) == max((r[0], r[1]) for r in top)


def test_pure_noise_shrinks_heavily():
    hits = 0
    years = np.arange(1993, 2020)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((27, 12))
        X = (X - X.mean(0)) / X.std(0, ddof=1)
        A = rng.standard_normal((27, 7))
        A -= A.mean(0)
        res = cv_select(X, A, "lasso", years)
        hits += res.params.lambda1 >= 0.1 * lambda_max(X, A)
    assert hits >= 90


@pytest.mark.parametrize("seed", range(5))
def test_planted_sparse_recovery(seed):
    rng = np.random.default_rng(seed)
    n, d, k = 28, 10, 3
    X = rng.standard_normal((n, d))
    X = (X - X.mean(0)) / X.std(0, ddof=1)
    B_star = np.zeros((d, k))
    B_star[[1, 4, 7]] = rng.uniform(0.5, 1.5, (3, k)) * rng.choice([-1, 1], (3, k))
    A = X @ B_star + 1e-3 * rng.standard_normal((n, k))
    res = cv_select(X, A, "lasso", np.arange(1993, 1993 + n))
    # dense refit oracle: largest lambda1 keeping every planted row active
    grid = np.geomspace(lambda_max(X, A), 1e-4 * lambda_max(X, A), 400)
    keep = [l for l in grid if np.all(np.abs(fit_mtnet(X, A, l)[0][[1, 4, 7]]).sum(axis=1) > 0)]
    assert res.params.lambda1 <= max(keep)


# -- df, covariance, prediction -----------------------------------------------------------


def test_df_examples():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 5))
    B = np.zeros((5, 2))
    assert estimate_df(X, B, 0.0) == 0.0
    B[[0, 2, 4]] = 1.0
    assert estimate_df(X, B, 0.0) == 3.0
    Q, _ = np.linalg.qr(rng.standard_normal((20, 2)))
    assert estimate_df(Q, np.ones((2, 1)), 1.0) == pytest.approx(1.0, abs=1e-12)


def test_df_trace_oracle_and_monotone():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((15, 4))
    B = np.ones((4, 2))
    prev = np.inf
    for lam2 in (0.0, 0.1, 1.0, 10.0, 100.0):
        H = X @ np.linalg.inv(X.T @ X + lam2 * np.eye(4)) @ X.T
        df = estimate_df(X, B, lam2)
        assert df == pytest.approx(np.trace(H), abs=1e-10)
        assert df <= prev + 1e-12
        prev = df


def test_df_rank_deficient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((10, 1))
    X = np.hstack([x, 2 * x, rng.standard_normal((10, 1))])
    assert estimate_df(X, np.ones((3, 1)), 0.0) == pytest.approx(2.0, abs=1e-10)


def test_covariance_examples():
    S = estimate_loading_covariance(np.array([[1.0, 0.0], [-1.0, 0.0]]), 0.0)
    assert S.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert np.array_equal(estimate_loading_covariance(np.zeros((5, 3)), 1.0), np.zeros((3, 3)))
    rng = np.random.default_rng(3)
    E = rng.standard_normal((12, 3))
    brute = sum(np.outer(e, e) for e in E) / (12 - 2.5)
    S = estimate_loading_covariance(E, 2.5)
    assert np.allclose(S, brute, atol=1e-13)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-12
    # fallback denominator when df exceeds n
    assert np.allclose(estimate_loading_covariance(E, 20.0), E.T @ E)


def _fit(coef, mean=None, scale=None):
    d = coef.shape[0]
    return MultiTaskFit(
        coef=coef,
        params=HyperParams(1.0),
        df=0.0,
        cov=np.zeros((2, 2)),
        training_years=np.arange(12),
        feature_names=[f"f{j}" for j in range(d)],
        mean=np.zeros(d) if mean is None else mean,
        scale=np.ones(d) if scale is None else scale,
    )


def test_predict_examples():
    assert np.array_equal(predict_loadings(_fit(np.zeros((3, 2))), np.ones(3)), np.zeros(2))
    assert predict_loadings(_fit(np.array([[2.0, -1.0]])), [3.0]).tolist() == [6.0, -3.0]
    rng = np.random.default_rng(4)
    coef, mean, scale = rng.standard_normal((4, 2)), rng.standard_normal(4), rng.uniform(0.5, 2, 4)
    x = rng.standard_normal(4)
    fit = _fit(coef, mean, scale)
    assert np.allclose(predict_loadings(fit, x), coef.T @ ((x - mean) / scale), atol=1e-14)
    assert np.allclose(predict_loadings(fit, dict(zip(fit.feature_names, x))), predict_loadings(fit, x))
    with pytest.raises(FeatureMismatchError):
        predict_loadings(fit, np.ones(3))
    with pytest.raises(FeatureMismatchError):
        predict_loadings(fit, {"f0": 1.0})


def test_hyperparams():
    with pytest.raises(ConfigurationError):
        HyperParams(1.0, 0.5, "lasso")
    with pytest.raises(ConfigurationError):
        HyperParams(-1.0)
    with pytest.raises(ConfigurationError):
        HyperParams(1.0, 0.0, "ridge")


def test_fit_multitask_reports(tmp_path):
    X, A = instance(6, n=27, d=5, k=2)
    A = A + X[:, :2] @ np.array([[1.0, 0.5], [-0.5, 1.0]])
    fit = fit_multitask(X, A, np.arange(1993, 2020), mode="en_opt")
    assert fit.cov.shape == (2, 2)
    assert 0 <= fit.df <= fit.active.sum()
    fit.write_report(tmp_path / "c.csv")
    fit.write_selection(tmp_path / "s.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "feature,eof_index,coefficient_scaled,coefficient_raw"
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 1 + 120
    meta = fit.metadata()
    assert meta["constants"]["max_sweeps"] == 10_000 and meta["mode"] == "en_opt"

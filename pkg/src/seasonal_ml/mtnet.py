"""Multi-task elastic net for predicting EOF loadings.

Minimizes ``||A - X B||_F^2 + lambda2 ||B||_F^2 + lambda1 ||B||_21``
(no 1/2 or 1/n factors) by block coordinate descent over the rows of
``B``. Rows are shared across all ``k`` responses, so a feature is either
used for every EOF or for none.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import ConfigurationError, ConvergenceError, FeatureMismatchError, ValidationError

log = logging.getLogger(__name__)

MODES = ("lasso", "en_fixed", "en_opt")


@dataclass(frozen=True)
class SolverConstants:
    tol: float = 1e-8
    max_sweeps: int = 10_000
    kkt_tol: float = 1e-6
    n_lambda: int = 30
    lambda_floor: float = 1e-3
    en_ratio: float = 1.0
    en_opt_ratios: tuple = (0.0, 0.1, 1.0, 10.0)
    min_cv_years: int = 10
    polish_iters: int = 200_000


CONSTANTS = SolverConstants()


@dataclass(frozen=True)
class HyperParams:
    lambda1: float
    lambda2: float = 0.0
    mode: str = "lasso"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("penalties must be non-negative")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "lasso" and self.lambda2 != 0:
            raise ConfigurationError("lasso mode requires lambda2 = 0")


@njit(cache=True)
def _bcd_sweeps(G, C, B, lam1, lam2, tol, max_sweeps):
    d, k = C.shape
    S = G @ B
    r = np.empty(k)
    for sweep in range(max_sweeps):
        max_change = 0.0
        for j in range(d):
            norm_sq = 0.0
            for c in range(k):
                r[c] = C[j, c] - S[j, c] + G[j, j] * B[j, c]
                norm_sq += r[c] * r[c]
            norm = math.sqrt(norm_sq)
            denom = G[j, j] + lam2
            if norm <= 0.5 * lam1 or denom <= 0.0:
                shrink = 0.0
            else:
                shrink = (1.0 - 0.5 * lam1 / norm) / denom
            change_sq = 0.0
            for c in range(k):
                delta = r[c] * shrink - B[j, c]
                if delta != 0.0:
                    for i in range(d):
                        S[i, c] += G[i, j] * delta
                    B[j, c] += delta
                    change_sq += delta * delta
            change = math.sqrt(change_sq)
            if change > max_change:
                max_change = change
        fro = 0.0
        for j in range(d):
            for c in range(k):
                fro += B[j, c] * B[j, c]
        if max_change < tol * (1.0 + math.sqrt(fro)):
            return sweep + 1, True
    return max_sweeps, False


@njit(cache=True)
def _prox_gradient(G, C, B, lam1, lam2, n_iter):
    """Accelerated proximal gradient with gradient-based restarts; used
    only when coordinate descent stalls on a badly conditioned design."""
    d, k = C.shape
    step = 1.0 / (2.0 * (np.linalg.eigvalsh(G).max() + lam2))
    Y = B.copy()
    prev = B.copy()
    theta = 1.0
    for _ in range(n_iter):
        grad = 2.0 * (G @ Y - C) + 2.0 * lam2 * Y
        V = Y - step * grad
        for j in range(d):
            norm = 0.0
            for c in range(k):
                norm += V[j, c] * V[j, c]
            norm = math.sqrt(norm)
            f = 0.0 if norm <= step * lam1 else 1.0 - step * lam1 / norm
            for c in range(k):
                B[j, c] = f * V[j, c]
        restart = 0.0
        for j in range(d):
            for c in range(k):
                restart += (Y[j, c] - B[j, c]) * (B[j, c] - prev[j, c])
        if restart > 0.0:
            theta = 1.0
            Y[:, :] = B
        else:
            theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            Y[:, :] = B + ((theta - 1.0) / theta_next) * (B - prev)
            theta = theta_next
        prev[:, :] = B


def objective(X, A, B, lambda1, lambda2):
    resid = A - X @ B
    return float(
        (resid**2).sum() + lambda2 * (B**2).sum() + lambda1 * np.sqrt((B**2).sum(axis=1)).sum()
    )


def lambda_max(X, A):
    """Smallest ``lambda1`` for which ``B = 0`` minimizes the objective."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A, dtype=float)
    if X.shape[1] == 0:
        return 0.0
    return float(2 * np.sqrt(((X.T @ A) ** 2).sum(axis=1)).max())


def kkt_violation(G, C, B, lambda1, lambda2):
    """Largest subgradient-optimality violation over rows of ``B``."""
    grad = -2 * (C - G @ B) + 2 * lambda2 * B
    norms = np.sqrt((B**2).sum(axis=1))
    active = norms > 0
    viol = np.zeros(B.shape[0])
    if active.any():
        g = grad[active] + lambda1 * B[active] / norms[active, None]
        viol[active] = np.sqrt((g**2).sum(axis=1))
    gn = np.sqrt((grad[~active] ** 2).sum(axis=1))
    viol[~active] = np.maximum(0.0, gn - lambda1)
    return float(viol.max()) if viol.size else 0.0


def _validate(X, A):
    X = np.ascontiguousarray(X, dtype=float)
    A = np.ascontiguousarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if X.ndim != 2 or X.shape[0] != A.shape[0]:
        raise ValidationError(f"X {X.shape} and A {A.shape} are not aligned")
    if X.shape[0] < 2:
        raise ValidationError("need at least two rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(A))):
        raise ValidationError("non-finite values in X or A")
    return X, A


def fit_mtnet(X, A, lambda1, lambda2=0.0, warm_start=None, constants=CONSTANTS, debug=False, gram=None):
    """Minimize the multi-task elastic-net objective; returns ``(B, sweeps)``.

    ``gram`` may pass a precomputed ``(X'X, X'A)`` pair.
    """
    X, A = _validate(X, A)
    if lambda1 < 0 or lambda2 < 0:
        raise ValidationError("penalties must be non-negative")
    d, k = X.shape[1], A.shape[1]
    if d == 0:
        return np.zeros((0, k)), 0
    G, C = gram if gram is not None else (X.T @ X, X.T @ A)
    G = np.ascontiguousarray(G)
    C = np.ascontiguousarray(C)
    B = np.zeros((d, k)) if warm_start is None else np.array(warm_start, dtype=float, order="C")
    scale = max(1.0, 2 * float(np.sqrt((C**2).sum(axis=1)).max()))

    tol = constants.tol
    used = 0
    while True:
        if debug:
            before = objective(X, A, B, lambda1, lambda2)
            n, converged = _bcd_sweeps(G, C, B, float(lambda1), float(lambda2), tol, 1)
            after = objective(X, A, B, lambda1, lambda2)
            assert after <= before + 1e-12 * (1 + abs(before)), "objective increased"
            used += n
            if not converged and used < constants.max_sweeps:
                continue
        else:
            n, _ = _bcd_sweeps(G, C, B, float(lambda1), float(lambda2), tol, constants.max_sweeps - used)
            used += n
        viol = kkt_violation(G, C, B, lambda1, lambda2)
        if viol <= constants.kkt_tol * scale:
            return B, used
        if used >= constants.max_sweeps:
            return _polish(G, C, B, lambda1, lambda2, constants, scale, viol, used)
        tol *= 1e-2


def _polish(G, C, B, lambda1, lambda2, constants, scale, viol, used):
    log.info("coordinate descent stalled (KKT residual %.3e after %d sweeps); polishing", viol, used)
    chunk = 1000
    done = 0
    while done < constants.polish_iters:
        _prox_gradient(G, C, B, float(lambda1), float(lambda2), chunk)
        done += chunk
        viol = kkt_violation(G, C, B, lambda1, lambda2)
        if viol <= constants.kkt_tol * scale:
            return B, used
    raise ConvergenceError("block coordinate descent did not converge", viol, used)


def cv_folds(years):
    """Fold id of each training year: sorted position ``j`` goes to
    ``(j mod 10) // 2`` -- consecutive pairs, every decade in every fold."""
    order = np.argsort(np.asarray(years), kind="stable")
    folds = np.empty(len(order), dtype=np.int64)
    folds[order] = (np.arange(len(order)) % 10) // 2
    return folds


def lambda_grid(lmax, constants=CONSTANTS):
    return lmax * np.logspace(0.0, math.log10(constants.lambda_floor), constants.n_lambda)


def _ratios(mode, constants, ratio=None):
    if mode == "lasso":
        return (0.0,)
    if mode == "en_fixed":
        return (constants.en_ratio if ratio is None else float(ratio),)
    if mode == "en_opt":
        return tuple(constants.en_opt_ratios)
    raise ConfigurationError(f"unknown mode {mode!r}")


@dataclass
class CvResult:
    params: HyperParams
    table: list  # (lambda1, lambda2, mean validation mse)


def cv_select(X, A, mode, training_years, constants=CONSTANTS, ratio=None) -> CvResult:
    """Grid search over ``(lambda1, lambda2)`` with the paired-decade
    5-fold split; ties go to the larger ``lambda1`` then larger ``lambda2``."""
    X, A = _validate(X, A)
    years = np.asarray(training_years)
    if len(years) < constants.min_cv_years:
        raise ConfigurationError(f"cross-validation needs {constants.min_cv_years} years, got {len(years)}")
    if len(years) != X.shape[0]:
        raise ValidationError("training_years must match the rows of X")
    folds = cv_folds(years)
    lmax = lambda_max(X, A)
    ratios = _ratios(mode, constants, ratio)
    if lmax == 0:
        return CvResult(HyperParams(0.0, 0.0, mode), [(0.0, 0.0, float((A**2).mean()))])
    grid = lambda_grid(lmax, constants)

    mse = np.zeros((len(ratios), len(grid)))
    fold_ids = np.unique(folds)
    for f in fold_ids:
        tr, va = folds != f, folds == f
        Xt, At = X[tr], A[tr]
        gram = (Xt.T @ Xt, Xt.T @ At)
        for r_i, r in enumerate(ratios):
            B = None
            for l_i, l1 in enumerate(grid):
                B, _ = fit_mtnet(Xt, At, l1, r * l1, warm_start=B, constants=constants, gram=gram)
                err = A[va] - X[va] @ B
                mse[r_i, l_i] += (err**2).mean()
    mse /= len(fold_ids)

    table = [(float(l1), float(r * l1), float(mse[r_i, l_i])) for r_i, r in enumerate(ratios) for l_i, l1 in enumerate(grid)]
    best = mse.min()
    thresh = best + 1e-12 * max(abs(best), 1e-300)
    candidates = [(l1, l2, m) for l1, l2, m in table if m <= thresh]
    l1, l2, _ = max(candidates, key=lambda c: (c[0], c[1]))
    return CvResult(HyperParams(l1, l2, mode), table)


def estimate_df(X, B, lambda2):
    """Effective degrees of freedom ``tr(X_A (X_A'X_A + lambda2 I)^-1 X_A')``
    over the active rows of ``B``."""
    X = np.asarray(X, dtype=float)
    active = np.sqrt((np.asarray(B) ** 2).sum(axis=1)) > 0
    m = int(active.sum())
    if m == 0:
        return 0.0
    XA = X[:, active]
    gram = XA.T @ XA
    if lambda2 == 0:
        rank = np.linalg.matrix_rank(XA)
        if rank < m:
            log.warning("active design is rank deficient (%d < %d); using pseudo-inverse", rank, m)
            return float(np.trace(XA @ np.linalg.pinv(gram) @ XA.T))
        # trace of the identity
        return float(m)
    return float(np.trace(np.linalg.solve(gram + lambda2 * np.eye(m), gram)))


def estimate_loading_covariance(residuals, df):
    """Residual outer-product sum divided by ``n - df``."""
    E = np.asarray(residuals, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    n = E.shape[0]
    denom = n - df
    if denom <= 0:
        denom = max(1.0, n - df)
        log.warning("n=%d does not exceed df=%.3f; using denominator %.3f", n, df, denom)
    S = E.T @ E / denom
    return 0.5 * (S + S.T)


@dataclass
class MultiTaskFit:
    coef: np.ndarray  # (d, k), standardized-feature scale
    params: HyperParams
    df: float
    cov: np.ndarray
    training_years: np.ndarray
    feature_names: list
    mean: np.ndarray
    scale: np.ndarray
    cv_table: list = field(default_factory=list)
    sweeps: int = 0

    @property
    def active(self):
        return np.sqrt((self.coef**2).sum(axis=1)) > 0

    @property
    def raw_coef(self):
        return self.coef / self.scale[:, None]

    def metadata(self):
        return {
            "df": self.df,
            "active_size": int(self.active.sum()),
            "sweeps": self.sweeps,
            "lambda1": self.params.lambda1,
            "lambda2": self.params.lambda2,
            "mode": self.params.mode,
            "constants": asdict(CONSTANTS),
        }

    def write_report(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("feature,eof_index,coefficient_scaled,coefficient_raw\n")
            raw = self.raw_coef
            for j, name in enumerate(self.feature_names):
                for i in range(self.coef.shape[1]):
                    fh.write(f"{name},{i + 1},{float(self.coef[j, i])!r},{float(raw[j, i])!r}\n")

    def write_selection(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("lambda1,lambda2,cv_mse\n")
            for l1, l2, m in self.cv_table:
                fh.write(f"{l1!r},{l2!r},{m!r}\n")


def fit_multitask(X, A, training_years, mode="lasso", feature_names=None, mean=None, scale=None,
                  params=None, ratio=None, constants=CONSTANTS) -> MultiTaskFit:
    """Cross-validate (unless ``params`` is given), refit on all training
    rows, and estimate df and the loading-error covariance."""
    X, A = _validate(X, A)
    d = X.shape[1]
    table = []
    if params is None:
        cv = cv_select(X, A, mode, training_years, constants, ratio)
        params, table = cv.params, cv.table
    B, sweeps = fit_mtnet(X, A, params.lambda1, params.lambda2, constants=constants)
    df = estimate_df(X, B, params.lambda2)
    cov = estimate_loading_covariance(A - X @ B, df)
    return MultiTaskFit(
        coef=B,
        params=params,
        df=df,
        cov=cov,
        training_years=np.asarray(training_years),
        feature_names=list(feature_names) if feature_names is not None else [f"x{j}" for j in range(d)],
        mean=np.zeros(d) if mean is None else np.asarray(mean, dtype=float),
        scale=np.ones(d) if scale is None else np.asarray(scale, dtype=float),
        cv_table=table,
        sweeps=sweeps,
    )


def predict_loadings(fit: MultiTaskFit, x):
    """Point forecast ``B' x_scaled`` for a raw feature vector ``x``.

    ``x`` is an array on the fit's feature roster or a mapping from
    feature name to raw value.
    """
    if isinstance(x, dict):
        if set(x) != set(fit.feature_names):
            raise FeatureMismatchError("feature roster differs from the fitted model")
        x = [x[name] for name in fit.feature_names]
    x = np.asarray(x, dtype=float)
    if x.shape != (len(fit.feature_names),):
        raise FeatureMismatchError(f"expected {len(fit.feature_names)} features, got {x.shape}")
    xs = (x - fit.mean) / fit.scale
    return fit.coef.T @ xs

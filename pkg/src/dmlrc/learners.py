"""Nuisance learners: design expansion, least squares and cross-validated LASSO.

All learners return a :class:`LinearFit`, a de-standardised affine predictor
over named design columns. The LASSO penalises coefficients on columns
standardised to zero mean and unit (population) standard deviation; the
intercept is never penalised.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import ConfigError, ConvergenceError, SingularDesignError

RANK_TOL = 1e-10
CD_TOL = 1e-8
ALIAS_TOL = 1e-12
CD_MAX_SWEEPS = 10_000


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    coefficients: np.ndarray
    columns: tuple
    lam: float = 0.0
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    def predict(self, design):
        design = np.asarray(design, dtype=float)
        return self.intercept + design @ self.coefficients

    def to_dict(self):
        return {
            "intercept": float(self.intercept),
            "lambda": float(self.lam),
            "coefficients": {
                str(name): float(c) for name, c in zip(self.columns, self.coefficients)
            },
        }


@dataclass(frozen=True)
class DesignSpec:
    """Column names of the confounder basis: exposures first, then covariates."""

    exposure_names: tuple = ()
    covariate_names: tuple = ()
    interactions: bool = False

    @property
    def main_names(self):
        return tuple(self.exposure_names) + tuple(self.covariate_names)

    @property
    def column_names(self):
        names = list(self.main_names)
        if self.interactions:
            names += [f"{a}*{b}" for a, b in combinations(self.main_names, 2)]
        return tuple(names)

    @property
    def n_columns(self):
        d = len(self.main_names)
        return d + (d * (d - 1) // 2 if self.interactions else 0)


def expand_basis(spec: DesignSpec, X2hat, W):
    """Build the confounder design from exposures ``X2hat`` and covariates ``W``.

    Accepts a single row (1-d inputs) or a matrix of rows. Column order is
    main effects in input order, then pairwise products ``(i, j)`` with
    ``i < j`` in lexicographic order.
    """
    X2hat = np.asarray(X2hat, dtype=float)
    W = np.asarray(W, dtype=float)
    single = X2hat.ndim == 1 and W.ndim == 1
    X2hat = np.atleast_2d(X2hat) if X2hat.ndim == 1 else X2hat
    W = np.atleast_2d(W) if W.ndim == 1 else W
    n = max(X2hat.shape[0], W.shape[0])
    if X2hat.size == 0:
        X2hat = np.zeros((n, 0))
    if W.size == 0:
        W = np.zeros((n, 0))
    if X2hat.shape[1] != len(spec.exposure_names) or W.shape[1] != len(spec.covariate_names):
        raise ConfigError(
            f"basis expects {len(spec.exposure_names)} exposures and "
            f"{len(spec.covariate_names)} covariates, got {X2hat.shape[1]} and {W.shape[1]}"
        )
    main = np.hstack([X2hat, W])
    if spec.interactions and main.shape[1] > 1:
        i, j = np.triu_indices(main.shape[1], k=1)
        main = np.hstack([main, main[:, i] * main[:, j]])
    return main[0] if single else main


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    return center, scale


def _column_names(columns, p):
    if columns is None:
        return tuple(f"x{k}" for k in range(p))
    if len(columns) != p:
        raise ConfigError(f"{len(columns)} column names for {p} columns")
    return tuple(columns)


def ols_fit(design, y, columns: Sequence[str] | None = None) -> LinearFit:
    """Least squares with an unpenalised intercept.

    Rank is judged on the centred design by pivoted QR: a diagonal entry of
    ``R`` whose square falls below ``RANK_TOL`` times the leading one marks
    the design singular.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = _column_names(columns, p)
    if n < p + 2:
        raise SingularDesignError(f"ols_fit needs more than {p + 1} rows, got {n}")
    center, scale = _standardize(X)
    ybar = y.mean()
    if p == 0:
        return LinearFit(float(ybar), np.zeros(0), names, 0.0, center, scale)
    Xc = X - center
    Q, R, piv = scipy.linalg.qr(Xc, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d[0] == 0.0 or np.any(d**2 < RANK_TOL * d[0] ** 2):
        raise SingularDesignError("design matrix is rank deficient")
    coef = np.empty(p)
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ (y - ybar))
    intercept = ybar - center @ coef
    return LinearFit(float(intercept), coef, names, 0.0, center, scale)


def _gram_problem(X, y):
    """Standardised Gram matrix and correlation vector for the CD kernel."""
    n = X.shape[0]
    center, scale = _standardize(X)
    safe = np.where(scale > 0, scale, 1.0)
    Xs = (X - center) / safe
    Xs[:, scale == 0] = 0.0
    ybar = y.mean()
    gram = Xs.T @ Xs / n
    corr = Xs.T @ (y - ybar) / n
    alias = _aliased(gram)
    gram[alias, :] = 0.0
    gram[:, alias] = 0.0
    corr[alias] = 0.0
    return gram, corr, center, scale, ybar


def _aliased(gram):
    """Columns whose standardised values repeat an earlier column up to sign.

    Any split of weight between such copies is optimal, so the later copies
    are held at zero and the earlier one carries the coefficient. Leaving
    them in gives a singular Gram along which coordinate descent drifts.
    """
    p = gram.shape[0]
    live = np.diag(gram) > 0
    out = np.zeros(p, dtype=bool)
    for j in range(p):
        if not live[j]:
            continue
        earlier = live[:j] & ~out[:j]
        if np.any(np.abs(gram[j, :j][earlier]) >= 1.0 - ALIAS_TOL):
            out[j] = True
    return out


def _destandardize(beta_std, center, scale, ybar, lam, names):
    safe = np.where(scale > 0, scale, 1.0)
    coef = np.where(scale > 0, beta_std / safe, 0.0)
    intercept = ybar - center @ coef
    return LinearFit(float(intercept), coef, names, float(lam), center, scale)


def lambda_max(design, y):
    """Smallest penalty at which every standardised coefficient is zero."""
    X = np.asarray(design, dtype=float)
    if X.shape[1] == 0:
        return 0.0
    _, corr, *_ = _gram_problem(X, np.asarray(y, dtype=float))
    return float(np.max(np.abs(corr)))


def lambda_grid(lam_max, n=100, ratio=1e-3):
    """Descending log-spaced grid from ``lam_max`` down to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, n)


def _polish(gram, corr, lam, beta):
    """Exact minimiser on the active set and signs of ``beta``, if it is optimal.

    Coordinate descent crawls on near-collinear designs; once the support
    has settled the stationarity equations pin the solution down directly.
    Returns ``None`` unless the result keeps its signs and satisfies the KKT
    bound on every inactive column.
    """
    active = np.flatnonzero(beta)
    if active.size == 0:
        return None
    signs = np.sign(beta[active])
    try:
        b = np.linalg.solve(gram[np.ix_(active, active)], corr[active] - lam * signs)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(b) != signs):
        return None
    full = np.zeros_like(beta)
    full[active] = b
    grad = np.abs(corr - gram @ full)
    grad[active] = 0.0
    if np.any(grad > lam * (1.0 + 1e-9) + 1e-12):
        return None
    return full


def _run_path(gram, corr, lambdas, beta, tol, max_sweeps):
    out = np.zeros((lambdas.size, corr.size))
    start = 0
    while start < lambdas.size:
        path, sweeps, failed = _kernels.cd_path(gram, corr, lambdas[start:], beta, tol,
                                                max_sweeps)
        if failed < 0:
            out[start:] = path
            break
        idx = start + failed
        out[start:idx] = path[:failed]
        fixed = _polish(gram, corr, lambdas[idx], beta)
        if fixed is None:
            raise ConvergenceError(
                f"coordinate descent did not converge at lambda={lambdas[idx]:.6g} "
                f"after {int(sweeps[failed])} sweeps",
                iterations=int(sweeps[failed]),
            )
        beta[:] = fixed
        out[idx] = fixed
        start = idx + 1
    return out


def lasso_path(design, y, lambdas, columns=None, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS):
    """Fits along a descending penalty grid with warm starts."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    names = _column_names(columns, X.shape[1])
    lambdas = np.asarray(lambdas, dtype=float)
    gram, corr, center, scale, ybar = _gram_problem(X, y)
    path = _run_path(gram, corr, lambdas, np.zeros(X.shape[1]), tol, max_sweeps)
    return [_destandardize(b, center, scale, ybar, lam, names) for b, lam in zip(path, lambdas)]


def lasso_fit(design, y, lam, columns=None, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS) -> LinearFit:
    """LASSO at a single penalty.

    Minimises ``(1/2N)||y - Xb - b0||^2 + lam * ||b||_1`` over standardised
    columns. Raises :class:`ConvergenceError` after ``max_sweeps`` full
    sweeps without the largest coefficient move dropping below ``tol``.
    """
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ConfigError("lasso_fit needs at least 2 rows")
    return lasso_path(X, y, [lam], columns, tol, max_sweeps)[0]


def fold_assignment(n, k, seed):
    """Seeded shuffle followed by round-robin assignment to ``k`` folds."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return assignment


@dataclass
class CVResult:
    lam: float
    fit: LinearFit
    grid: np.ndarray = field(repr=False)
    cv_error: np.ndarray = field(repr=False)


def lasso_cv(design, y, folds=5, grid=None, seed=0, columns=None, n_grid=100, ratio=1e-3,
             rule="min", tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS):
    """Choose the penalty by K-fold cross-validation, then refit on all rows.

    Returns ``(lambda_star, fit)``. With ``rule="min"`` the penalty minimises
    pooled out-of-fold squared error (ties go to the larger penalty). With
    ``rule="1se"`` it is the largest penalty whose mean fold error is within
    one standard error of the minimum. The default grid is ``n_grid``
    log-spaced values from the full-data ``lambda_max``.
    """
    res = lasso_cv_full(design, y, folds, grid, seed, columns, n_grid, ratio, rule, tol,
                        max_sweeps)
    return res.lam, res.fit


def lasso_cv_full(design, y, folds=5, grid=None, seed=0, columns=None, n_grid=100, ratio=1e-3,
                  rule="min", tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS) -> CVResult:
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = _column_names(columns, p)
    if folds < 2:
        raise ConfigError("lasso_cv needs at least 2 folds")
    if rule not in ("min", "1se"):
        raise ConfigError(f"unknown penalty rule {rule!r}")
    if n < 2 * folds:
        raise ConfigError(f"lasso_cv with {folds} folds needs at least {2 * folds} rows")
    if grid is None:
        grid = lambda_grid(lambda_max(X, y), n_grid, ratio) if p else np.zeros(1)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) > 0):
        raise ConfigError("lambda grid must be nonempty and sorted descending")
    if p == 0:
        fit = LinearFit(float(y.mean()), np.zeros(0), names, 0.0, np.zeros(0), np.zeros(0))
        return CVResult(0.0, fit, grid, np.zeros(grid.size))
    if grid[0] == 0.0 and grid.size == 1:
        # lambda_max == 0: nothing correlates with y, the intercept-only fit is exact
        fit = lasso_fit(X, y, 0.0, names, tol, max_sweeps)
        return CVResult(0.0, fit, grid, np.zeros(1))

    assignment = fold_assignment(n, folds, seed)
    sse = np.zeros((folds, grid.size))
    counts = np.zeros(folds)
    # fold order is fixed so the reduction is deterministic
    for f in range(folds):
        test = assignment == f
        train = ~test
        gram, corr, center, scale, ybar = _gram_problem(X[train], y[train])
        path = _run_path(gram, corr, grid, np.zeros(p), tol, max_sweeps)
        safe = np.where(scale > 0, scale, 1.0)
        Xt = (X[test] - center) / safe
        Xt[:, scale == 0] = 0.0
        pred = ybar + Xt @ path.T
        sse[f] = ((y[test][:, None] - pred) ** 2).sum(axis=0)
        counts[f] = test.sum()
    cv_error = sse.sum(axis=0) / n
    best = int(np.argmin(cv_error))
    if rule == "1se":
        fold_mse = sse / counts[:, None]
        se = fold_mse.std(axis=0, ddof=1) / np.sqrt(folds)
        best = int(np.flatnonzero(fold_mse.mean(axis=0) <= fold_mse.mean(axis=0)[best] + se[best])[0])
    gram, corr, center, scale, ybar = _gram_problem(X, y)
    path = _run_path(gram, corr, grid[: best + 1], np.zeros(p), tol, max_sweeps)
    fit = _destandardize(path[-1], center, scale, ybar, grid[best], names)
    return CVResult(float(grid[best]), fit, grid, cv_error)

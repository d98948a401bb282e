"""Cross-fitted orthogonal estimation of the exposure effect.

The partially linear model ``Y = X1 * beta + g(X2, W) + xi`` is fitted with
exposures that are either the true values (``mode="true"``), the surrogates
(``"uncorrected"``) or the calibration predictions (``"corrected"``). In
corrected mode the asymptotic variance gains a second component that
propagates the calibration uncertainty through a forward-difference
gradient of the score with respect to ``theta``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationModel, predict_exposures
from .errors import (
    ConfigError,
    DegenerateOrthogonalizationError,
    DmlRcError,
    FoldFailure,
    InternalConsistencyError,
)
from .learners import DesignSpec, LinearFit, expand_basis, fold_assignment, lasso_cv, ols_fit

MODES = ("true", "uncorrected", "corrected")
G_TARGETS = ("partialling", "structural", "outcome")
Z975 = 1.959964
DEFAULT_DELTA = 1e-4
DENOM_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass(frozen=True)
class MainStudy:
    """Outcome, surrogate exposures and covariates; ``X_true`` only in simulations.

    ``W_cal`` holds the covariates the calibration model was fitted with when
    they differ from the confounder covariates ``W``.
    """

    Y: np.ndarray
    Zexp: np.ndarray
    W: np.ndarray
    X_true: np.ndarray | None = None
    W_cal: np.ndarray | None = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).ravel()
        Z = np.atleast_2d(np.asarray(self.Zexp, dtype=float))
        W = np.asarray(self.W, dtype=float)
        if W.size == 0:
            W = np.zeros((Z.shape[0], 0))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Zexp", Z)
        object.__setattr__(self, "W", W)
        if self.X_true is not None:
            object.__setattr__(self, "X_true", np.asarray(self.X_true, dtype=float))
        if self.W_cal is not None:
            Wc = np.asarray(self.W_cal, dtype=float).reshape(Y.size, -1)
            if np.isnan(Wc).any():
                raise ConfigError("calibration covariates must be complete")
            object.__setattr__(self, "W_cal", Wc)
        if Z.shape[0] != Y.size or W.shape[0] != Y.size:
            raise ConfigError("Y, Zexp and W must have the same number of rows")
        if np.isnan(Y).any() or np.isnan(Z).any() or np.isnan(W).any():
            raise ConfigError("main study inputs must be complete")

    @property
    def N(self):
        return self.Y.size

    @property
    def calibration_covariates(self):
        return self.W if self.W_cal is None else self.W_cal


@dataclass(frozen=True)
class SplitPlan:
    K: int
    assignment: np.ndarray
    seed: int | None = None

    def fold_rows(self, k):
        return np.flatnonzero(self.assignment == k)


def make_folds(N, K, seed) -> SplitPlan:
    if K < 2:
        raise ConfigError("cross-fitting needs K >= 2")
    if N < 2 * K:
        raise ConfigError(f"K={K} folds need at least {2 * K} rows, got {N}")
    return SplitPlan(K, fold_assignment(N, K, seed), int(seed))


@dataclass(frozen=True)
class LearnerConfig:
    """How nuisance functions are learned.

    ``g`` is the confounding function in ``Y = X1*beta + g + xi``.
    ``g_target="partialling"`` learns ``l = E[Y | basis]`` and uses
    ``g = l - beta * m``, with ``beta`` solved jointly with the fold
    estimate. ``"structural"`` regresses ``Y - beta_init * X1`` on the basis,
    ``beta_init`` being a partialling-out estimate from the training rows.
    ``"outcome"`` takes ``g = l``.
    """

    kind: str = "lasso"
    cv_folds: int = 5
    n_grid: int = 100
    grid_ratio: float = 1e-3
    rule: str = "min"
    g_target: str = "partialling"

    def __post_init__(self):
        if self.kind not in ("lasso", "ols"):
            raise ConfigError(f"unknown learner {self.kind!r}")
        if self.g_target not in G_TARGETS:
            raise ConfigError(f"unknown g_target {self.g_target!r}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "cv_folds": self.cv_folds,
            "n_grid": self.n_grid,
            "grid_ratio": self.grid_ratio,
            "rule": self.rule,
            "g_target": self.g_target,
        }


@dataclass(frozen=True)
class NuisancePair:
    """Nuisance fits serving estimation fold ``fold``.

    ``g_hat`` is ``None`` while ``g = l_hat - beta * m_hat`` still waits for
    its ``beta`` (see ``at_beta``).
    """

    g_hat: LinearFit | None
    m_hat: LinearFit
    fold: int
    l_hat: LinearFit | None = None
    beta_init: float | None = None

    def at_beta(self, beta):
        """Pair with ``g_hat = l_hat - beta * m_hat``."""
        if self.l_hat is None:
            raise ConfigError("at_beta needs l_hat")
        l, m = self.l_hat, self.m_hat
        g_hat = LinearFit(l.intercept - beta * m.intercept, l.coefficients - beta * m.coefficients,
                          l.columns, l.lam)
        return NuisancePair(g_hat, m, self.fold, l, float(beta))

    def to_dict(self):
        d = {"fold": self.fold, "m_hat": self.m_hat.to_dict()}
        if self.g_hat is not None:
            d["g_hat"] = self.g_hat.to_dict()
        if self.l_hat is not None:
            d["l_hat"] = self.l_hat.to_dict()
            d["beta_init"] = self.beta_init
        return d


def _sub_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1, np.uint64)[0])


def _learn(basis, target, cfg: LearnerConfig, seed, columns):
    if cfg.kind == "ols":
        return ols_fit(basis, target, columns)
    _, fit = lasso_cv(basis, target, folds=cfg.cv_folds, seed=seed, columns=columns,
                      n_grid=cfg.n_grid, ratio=cfg.grid_ratio, rule=cfg.rule)
    return fit


def fit_nuisance_pair(basis, Y, X1, cfg: LearnerConfig, seed=0, fold=0, columns=None):
    """Learn ``g`` and ``m`` on a training sample already expanded to a basis."""
    m_hat = _learn(basis, X1, cfg, _sub_seed(seed, fold, 0), columns)
    if cfg.g_target == "outcome":
        g_hat = _learn(basis, Y, cfg, _sub_seed(seed, fold, 1), columns)
        return NuisancePair(g_hat, m_hat, fold)
    l_hat = _learn(basis, Y, cfg, _sub_seed(seed, fold, 1), columns)
    if cfg.g_target == "partialling":
        return NuisancePair(None, m_hat, fold, l_hat)
    v = X1 - m_hat.predict(basis)
    vv = v @ v
    if vv < DENOM_TOL * (X1 @ X1):
        raise DegenerateOrthogonalizationError(
            "exposure residual vanishes on the training sample; m is too flexible"
        )
    beta_init = float(v @ (Y - l_hat.predict(basis)) / vv)
    g_hat = _learn(basis, Y - beta_init * X1, cfg, _sub_seed(seed, fold, 2), columns)
    return NuisancePair(g_hat, m_hat, fold, l_hat, beta_init)


def fit_nuisances(train_rows, Y, X1, X2, W, spec: DesignSpec, learner_cfg: LearnerConfig,
                  seed=0, fold=0) -> NuisancePair:
    """Learn the nuisance pair from the rows in ``train_rows``.

    Under ``g_target="partialling"`` the returned pair has no ``g_hat`` yet.
    """
    rows = np.asarray(train_rows)
    basis = expand_basis(spec, np.asarray(X2)[rows], np.asarray(W)[rows])
    return fit_nuisance_pair(basis, np.asarray(Y)[rows], np.asarray(X1)[rows], learner_cfg,
                             seed, fold, spec.column_names)


def orthogonal_beta(fold_rows, Y, X1, basis, pair: NuisancePair):
    """Orthogonalised estimate of ``beta`` on one estimation fold.

    Without ``g_hat`` the estimate is the root of the same equation with
    ``g = l_hat - beta * m_hat``, which reduces to a residual-on-residual
    slope.
    """
    rows = np.asarray(fold_rows)
    x1 = np.asarray(X1, dtype=float)[rows]
    b = np.asarray(basis, dtype=float)[rows]
    y = np.asarray(Y, dtype=float)[rows]
    v = x1 - pair.m_hat.predict(b)
    if pair.g_hat is None:
        denom = v @ v
        if denom < DENOM_TOL * (x1 @ x1):
            raise DegenerateOrthogonalizationError(
                f"exposure residual vanishes on fold {pair.fold}"
            )
        return float(v @ (y - pair.l_hat.predict(b)) / denom)
    denom = x1 @ v
    if abs(denom) < DENOM_TOL * (x1 @ x1):
        raise DegenerateOrthogonalizationError(
            f"orthogonalisation denominator {denom:.3g} is numerically zero on fold {pair.fold}"
        )
    return float(v @ (y - pair.g_hat.predict(b)) / denom)


def _fold_predictions(basis, pairs, plan):
    m_pred = np.empty(basis.shape[0])
    g_pred = np.empty(basis.shape[0])
    for k, pair in enumerate(pairs):
        rows = plan.fold_rows(k)
        m_pred[rows] = pair.m_hat.predict(basis[rows])
        g_pred[rows] = pair.g_hat.predict(basis[rows])
    return m_pred, g_pred


def scores(Y, X1, basis, pairs, plan: SplitPlan, beta):
    """Per-observation scores with fold-matched nuisances."""
    m_pred, g_pred = _fold_predictions(basis, pairs, plan)
    return (X1 - m_pred) * (Y - X1 * beta - g_pred)


def _resolve_columns(n_exposures, focus, confounders):
    if not 0 <= focus < n_exposures:
        raise ConfigError(f"focus column {focus} out of range")
    if confounders is None:
        confounders = [j for j in range(n_exposures) if j != focus]
    confounders = list(confounders)
    if focus in confounders:
        raise ConfigError("the exposure of interest cannot also be a confounder")
    return confounders


def default_spec(n_confounders, n_covariates, interactions=False):
    return DesignSpec(
        tuple(f"X2_{j + 1}" for j in range(n_confounders)),
        tuple(f"W{j + 1}" for j in range(n_covariates)),
        interactions,
    )


def exposure_matrix(ms: MainStudy, mode, model: CalibrationModel | None = None, theta=None):
    """Exposures the estimator sees under ``mode``."""
    if mode == "true":
        if ms.X_true is None:
            raise ConfigError("mode 'true' needs the true exposures")
        return ms.X_true
    if mode == "uncorrected":
        return ms.Zexp
    if mode == "corrected":
        if model is None:
            raise ConfigError("mode 'corrected' needs a calibration model")
        return predict_exposures(model, ms.Zexp, ms.calibration_covariates, theta)
    raise ConfigError(f"mode must be one of {MODES}")


def _design(E, W, spec, focus, confounders):
    return E[:, focus], expand_basis(spec, E[:, confounders], W)


def score_i(obs, beta, theta, pair: NuisancePair, spec: DesignSpec, model: CalibrationModel,
            focus=0, confounders=None):
    """Score of one main-study observation ``obs = (Y, Z, W[, W_cal])`` at ``theta``."""
    y, z, w = obs[:3]
    w_cal = obs[3] if len(obs) > 3 else w
    xhat = predict_exposures(model, z, w_cal, theta)
    confounders = _resolve_columns(xhat.size, focus, confounders)
    x1 = xhat[focus]
    b = expand_basis(spec, xhat[confounders], np.asarray(w, dtype=float))
    return float((x1 - pair.m_hat.predict(b)) * (y - x1 * beta - pair.g_hat.predict(b)))


def numeric_score_gradient(ms: MainStudy, beta, model: CalibrationModel, pairs, plan: SplitPlan,
                           spec: DesignSpec, focus=0, confounders=None, delta=DEFAULT_DELTA):
    """Forward-difference gradient of the mean score with respect to ``theta``.

    Nuisance functions stay fixed; only the predicted exposures move.
    """
    if delta <= 0:
        raise ConfigError("delta must be positive")
    theta0 = np.asarray(model.theta, dtype=float).ravel()
    confounders = _resolve_columns(model.p + 1, focus, confounders)

    def mean_score(theta):
        E = predict_exposures(model, ms.Zexp, ms.calibration_covariates, theta)
        X1, basis = _design(E, ms.W, spec, focus, confounders)
        return scores(ms.Y, X1, basis, pairs, plan, beta).mean()

    base = mean_score(theta0)
    grad = np.empty(theta0.size)
    for j in range(theta0.size):
        theta = theta0.copy()
        theta[j] += delta
        grad[j] = (mean_score(theta) - base) / delta
    return grad


def variance_total(ms: MainStudy, beta_hat, model: CalibrationModel | None, pairs,
                   plan: SplitPlan, spec: DesignSpec, mode="corrected", focus=0,
                   confounders=None, delta=DEFAULT_DELTA):
    """Two-component asymptotic variance of the cross-fit estimator.

    Returns ``(var, (component1, component2))``. ``component2`` is zero when
    ``model`` is ``None``.
    """
    if (model is not None) != (mode == "corrected"):
        raise ConfigError("a calibration model is required exactly in corrected mode")
    E = exposure_matrix(ms, mode, model)
    confounders = _resolve_columns(E.shape[1], focus, confounders)
    X1, basis = _design(E, ms.W, spec, focus, confounders)
    m_pred, _ = _fold_predictions(basis, pairs, plan)
    N = ms.N
    J = float(np.sum(X1 * (X1 - m_pred)) / N)
    S = scores(ms.Y, X1, basis, pairs, plan, beta_hat)
    comp1 = float(S @ S / N**2)
    comp2 = 0.0
    if model is not None:
        g = numeric_score_gradient(ms, beta_hat, model, pairs, plan, spec, focus, confounders,
                                   delta)
        comp2 = float(g @ model.var_theta @ g)
        scale = PSD_TOL * float(g @ g) * max(float(np.trace(model.var_theta)), 1.0)
        if comp2 < -scale:
            raise InternalConsistencyError(f"calibration variance component is negative: {comp2}")
        comp2 = max(comp2, 0.0)
    if J == 0.0:
        raise DegenerateOrthogonalizationError("variance denominator J is zero")
    return (comp1 + comp2) / J**2, (comp1, comp2)


@dataclass
class DmlEstimate:
    beta_hat: float
    ase: float
    ci95: tuple
    p_value: float
    per_fold_betas: list
    variance_components: tuple
    mode: str
    estimator: str = "dml"
    config: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    def to_dict(self, diagnostics=True):
        d = {
            "estimator": self.estimator,
            "mode": self.mode,
            "beta": self.beta_hat,
            "ase": self.ase,
            "ci95": list(self.ci95),
            "p": self.p_value,
            "per_fold": list(self.per_fold_betas),
            "var_components": list(self.variance_components),
            "config": dict(self.config),
        }
        if diagnostics:
            d["diagnostics"] = list(self.diagnostics)
        return d

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def two_sided_p(beta, ase):
    if ase > 0:
        return math.erfc(abs(beta / ase) / math.sqrt(2.0))
    return 0.0 if beta != 0 else 1.0


def _estimate(beta, var, comps, betas, mode, estimator, config, diagnostics):
    ase = math.sqrt(var)
    config = dict(config)
    if ase == 0.0:
        config["degenerate_ase"] = True
    return DmlEstimate(
        beta_hat=float(beta),
        ase=ase,
        ci95=(beta - Z975 * ase, beta + Z975 * ase),
        p_value=two_sided_p(beta, ase),
        per_fold_betas=[float(b) for b in betas],
        variance_components=(float(comps[0]), float(comps[1])),
        mode=mode,
        estimator=estimator,
        config=config,
        diagnostics=diagnostics,
    )


def dml_estimate(ms: MainStudy, spec: DesignSpec | None = None, *, mode="corrected",
                 model: CalibrationModel | None = None, K=2, seed=0,
                 learner: LearnerConfig = LearnerConfig(), focus=0, confounders=None,
                 delta=DEFAULT_DELTA) -> DmlEstimate:
    """Cross-fit DML estimate of the effect of exposure column ``focus``."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode != "corrected":
        model = None
    E = exposure_matrix(ms, mode, model)
    confounders = _resolve_columns(E.shape[1], focus, confounders)
    if spec is None:
        spec = default_spec(len(confounders), ms.W.shape[1])
    X1, basis = _design(E, ms.W, spec, focus, confounders)
    plan = make_folds(ms.N, K, seed)
    pairs, betas, diagnostics = [], [], []
    for k in range(K):
        test = plan.fold_rows(k)
        train = np.flatnonzero(plan.assignment != k)
        try:
            pair = fit_nuisance_pair(basis[train], ms.Y[train], X1[train], learner,
                                     seed, k, spec.column_names)
            beta_k = orthogonal_beta(test, ms.Y, X1, basis, pair)
        except DmlRcError as exc:
            diagnostics.append({"fold": k, "error": str(exc)})
            raise FoldFailure(f"fold {k} failed: {exc}", diagnostics) from exc
        pairs.append(pair)
        betas.append(beta_k)
    beta = float(np.mean(betas))
    if learner.g_target == "partialling":
        pairs = [pair.at_beta(beta) for pair in pairs]
    for k, pair in enumerate(pairs):
        diagnostics.append({"fold": k, "beta": betas[k], "n_test": int(plan.fold_rows(k).size),
                            **pair.to_dict()})
    var, comps = variance_total(ms, beta, model, pairs, plan, spec, mode, focus, confounders,
                                delta)
    config = {"K": K, "seed": int(seed), "learner": learner.to_dict(),
              "interactions": spec.interactions, "delta": delta,
              "basis_columns": list(spec.column_names)}
    if model is not None:
        config["calibration_missing_policy"] = model.meta.get("missing_policy", "complete")
    return _estimate(beta, var, comps, betas, mode, "dml", config, diagnostics)


def slr_estimate(ms: MainStudy, spec: DesignSpec | None = None, *, mode="corrected",
                 model: CalibrationModel | None = None, focus=0, confounders=None,
                 delta=DEFAULT_DELTA) -> DmlEstimate:
    """Saturated linear regression with the same two-component variance.

    ``beta`` is the least-squares coefficient of ``X1`` given the basis. The
    variance reuses the single-fold machinery with ``m`` the least-squares
    fit of ``X1`` on the basis and ``g`` the basis part of the full fit.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode != "corrected":
        model = None
    E = exposure_matrix(ms, mode, model)
    confounders = _resolve_columns(E.shape[1], focus, confounders)
    if spec is None:
        spec = default_spec(len(confounders), ms.W.shape[1])
    X1, basis = _design(E, ms.W, spec, focus, confounders)
    full = ols_fit(np.column_stack([X1, basis]), ms.Y)
    beta = float(full.coefficients[0])
    m_hat = ols_fit(basis, X1, spec.column_names)
    g_hat = LinearFit(full.intercept, full.coefficients[1:], spec.column_names)
    pair = NuisancePair(g_hat, m_hat, 0)
    plan = SplitPlan(1, np.zeros(ms.N, dtype=np.int64))
    var, comps = variance_total(ms, beta, model, [pair], plan, spec, mode, focus, confounders,
                                delta)
    config = {"K": 1, "learner": {"kind": "ols"}, "interactions": spec.interactions,
              "delta": delta, "variance": "two-component score variance, single fold",
              "basis_columns": list(spec.column_names)}
    return _estimate(beta, var, comps, [beta], mode, "slr", config, [pair.to_dict()])

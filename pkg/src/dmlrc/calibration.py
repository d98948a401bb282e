"""Linear regression calibration fitted by working-independence GEE.

The calibration model maps ``L_i = (1, Z_i, W_i)`` to the expected true
exposures, one block of coefficients per constituent::

    E[X_i | Z_i, W_i] = (I_{p+1} kron L_i') theta

With an identity working correlation the stacked estimating equations
decouple, so block ``j`` is the least-squares fit of ``X[:, j]`` on ``L``.
``theta`` is always stored flat, block after block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, DegenerateVarianceError, SampleSizeError, SingularDesignError

RANK_TOL = 1e-10
MISSING_POLICIES = ("complete", "pairwise")


@dataclass(frozen=True)
class ValidationStudy:
    """Paired true/surrogate exposures. ``NaN`` in ``X`` marks a missing cell."""

    X: np.ndarray
    Z: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        W = np.asarray(self.W, dtype=float)
        if W.size == 0:
            W = np.zeros((Z.shape[0], 0))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "W", W)
        if X.shape != Z.shape:
            raise ConfigError(f"X has shape {X.shape} but Z has shape {Z.shape}")
        if W.shape[0] != Z.shape[0]:
            raise ConfigError("W must have one row per validation subject")
        if np.isnan(Z).any() or np.isnan(W).any():
            raise ConfigError("Z and W must be complete in the validation study")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1] - 1

    @property
    def q(self):
        return self.W.shape[1]


def design_rows(Z, W):
    """``L = (1, Z, W)`` for each row; 1-d inputs give a single row."""
    Z = np.asarray(Z, dtype=float)
    W = np.asarray(W, dtype=float)
    if Z.ndim == 1:
        return np.concatenate([[1.0], Z, W.ravel()])
    if W.size == 0:
        W = np.zeros((Z.shape[0], 0))
    return np.hstack([np.ones((Z.shape[0], 1)), Z, W])


def _block_solve(L, x, block):
    Q, R, piv = scipy.linalg.qr(L, mode="economic", pivoting=True)
    # pivots of L'L are the squared diagonal of R
    pivots = np.diag(R) ** 2
    if pivots[0] == 0.0 or np.any(pivots < RANK_TOL * pivots[0]):
        raise SingularDesignError(
            f"calibration design is rank deficient for constituent block {block}", block=block
        )
    coef = np.empty(L.shape[1])
    coef[piv] = scipy.linalg.solve_triangular(R, Q.T @ x)
    return coef


def fit_theta(evs: ValidationStudy):
    """Solve the working-independence estimating equations for ``theta``.

    Each block uses the rows where that constituent's true exposure is
    observed.
    """
    L = design_rows(evs.Z, evs.W)
    k = L.shape[1]
    blocks = []
    for j in range(evs.p + 1):
        obs = ~np.isnan(evs.X[:, j])
        if obs.sum() <= k:
            raise SampleSizeError(
                f"constituent block {j} has {int(obs.sum())} complete rows; need more than {k}"
            )
        blocks.append(_block_solve(L[obs], evs.X[obs, j], j))
    return np.concatenate(blocks)


def _check_theta(evs, theta):
    theta = np.asarray(theta, dtype=float).ravel()
    k = evs.p + evs.q + 2
    if theta.size != (evs.p + 1) * k:
        raise ConfigError(f"theta has length {theta.size}, expected {(evs.p + 1) * k}")
    return theta.reshape(evs.p + 1, k)


def residuals(evs: ValidationStudy, theta):
    """``X - Xhat`` with ``NaN`` where ``X`` is missing."""
    blocks = _check_theta(evs, theta)
    return evs.X - design_rows(evs.Z, evs.W) @ blocks.T


def residual_variances(evs: ValidationStudy, theta):
    """Mean squared residual per constituent over its observed rows."""
    r = residuals(evs, theta)
    obs = ~np.isnan(r)
    return (np.where(obs, r, 0.0) ** 2).sum(axis=0) / obs.sum(axis=0)


def sandwich_var_theta(evs: ValidationStudy, theta, sigma2, missing="complete"):
    """Robust (bread-meat-bread) covariance of ``theta``.

    ``V_i = diag(sigma2)`` and ``Var(X_i)`` is the residual outer product.
    With ``missing="complete"`` only rows observed in every constituent
    contribute. ``"pairwise"`` keeps every row, zeroes missing residuals in
    the meat and builds each bread block from that constituent's rows.
    """
    if missing not in MISSING_POLICIES:
        raise ConfigError(f"missing policy must be one of {MISSING_POLICIES}")
    blocks = _check_theta(evs, theta)
    sigma2 = np.asarray(sigma2, dtype=float)
    L = design_rows(evs.Z, evs.W)
    r = evs.X - L @ blocks.T
    obs = ~np.isnan(r)
    if missing == "complete":
        keep = obs.all(axis=1)
        L, r, obs = L[keep], r[keep], obs[keep]
    r = np.where(obs, r, 0.0)
    m, k = blocks.shape
    if not np.any(r):
        return np.zeros((m * k, m * k))
    if np.any(sigma2 <= 0):
        raise DegenerateVarianceError(
            "a residual variance is zero while other residuals are not; the bread is singular"
        )
    vinv = 1.0 / sigma2
    bread = np.zeros((m * k, m * k))
    for j in range(m):
        Lj = L[obs[:, j]]
        bread[j * k:(j + 1) * k, j * k:(j + 1) * k] = vinv[j] * (Lj.T @ Lj)
    # (V^-1 r r' V^-1) kron (L L') == u u' with u = (V^-1 r) kron L
    U = ((r * vinv)[:, :, None] * L[:, None, :]).reshape(L.shape[0], m * k)
    meat = U.T @ U
    try:
        cho = scipy.linalg.cho_factor(bread)
    except np.linalg.LinAlgError as exc:
        raise DegenerateVarianceError("sandwich bread is not positive definite") from exc
    half = scipy.linalg.cho_solve(cho, meat)
    var = scipy.linalg.cho_solve(cho, half.T)
    return 0.5 * (var + var.T)


@dataclass(frozen=True)
class CalibrationModel:
    theta: np.ndarray
    sigma2: np.ndarray
    var_theta: np.ndarray
    p: int
    q: int
    n: int
    meta: dict = field(default_factory=dict)

    @property
    def block_size(self):
        return self.p + self.q + 2

    @property
    def blocks(self):
        return np.asarray(self.theta).reshape(self.p + 1, self.block_size)

    def predict(self, Z, W, theta=None):
        return predict_exposures(self, Z, W, theta)

    def to_dict(self):
        return {
            "p": self.p,
            "q": self.q,
            "n": self.n,
            "theta": self.blocks.tolist(),
            "sigma2": np.asarray(self.sigma2).tolist(),
            "var_theta": np.asarray(self.var_theta).tolist(),
            "meta": dict(self.meta),
        }

    def to_json(self, **kwargs):
        # json writes floats with repr, which round-trips doubles exactly
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        return cls(
            theta=np.asarray(d["theta"], dtype=float).ravel(),
            sigma2=np.asarray(d["sigma2"], dtype=float),
            var_theta=np.asarray(d["var_theta"], dtype=float),
            p=int(d["p"]),
            q=int(d["q"]),
            n=int(d["n"]),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def predict_exposures(model: CalibrationModel, Z, W, theta=None):
    """Predicted true exposures ``(I kron L') theta`` for one row or many.

    ``theta`` overrides the fitted coefficients, which is how the score
    gradient perturbs the calibration.
    """
    blocks = model.blocks if theta is None else np.asarray(theta, dtype=float).reshape(
        model.p + 1, model.block_size)
    L = design_rows(Z, W)
    if L.shape[-1] != model.block_size:
        raise ConfigError(
            f"calibration expects {model.p + 1} exposures and {model.q} covariates"
        )
    return L @ blocks.T


def fit_calibration(evs: ValidationStudy, missing="complete") -> CalibrationModel:
    """Fit ``theta``, residual variances and the sandwich covariance."""
    theta = fit_theta(evs)
    sigma2 = residual_variances(evs, theta)
    var_theta = sandwich_var_theta(evs, theta, sigma2, missing=missing)
    n_missing = int(np.isnan(evs.X).sum())
    meta = {
        "missing_policy": missing,
        "missing_cells": n_missing,
        "complete_rows": int((~np.isnan(evs.X)).all(axis=1).sum()),
        "working_correlation": "independence",
    }
    return CalibrationModel(theta, sigma2, var_theta, evs.p, evs.q, evs.n, meta)

"""Monte-Carlo study of the six estimators under the eight outcome scenarios.

Twelve constituents are drawn from a multivariate normal truncated to the
positive orthant. Surrogates add correlated classical error scaled so each
true/surrogate correlation equals ``rho``. The outcome follows
``Y = 8 * X1 + g*(X2, W) + xi`` in the main study only.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.special import expit

from .calibration import ValidationStudy, fit_calibration
from .dml import LearnerConfig, MainStudy, Z975, _sub_seed, dml_estimate, slr_estimate
from .errors import ConfigError, DmlRcError, InfeasibleTruncationError, NumericalError

CONSTITUENTS = ("Br", "Ca", "Cu", "Fe", "Mn", "Ni", "S", "Se", "Si", "Ti", "V", "Zn")

# Pearson correlations of log surrogate exposure, order PM2.5 then CONSTITUENTS
_SURROGATE_CORR = """
1.00 0.12 0.15 0.25 0.31 0.16 0.27 0.35 0.17 0.23 0.30 0.21 0.30
0.12 1.00 0.08 0.24 0.28 0.31 0.17 0.00 0.15 -0.02 0.06 0.22 0.36
0.15 0.08 1.00 0.69 0.74 0.76 0.48 -0.28 -0.40 0.73 0.61 0.62 0.56
0.25 0.24 0.69 1.00 0.74 0.69 0.38 -0.14 -0.33 0.47 0.66 0.45 0.50
0.31 0.28 0.74 0.74 1.00 0.73 0.48 -0.03 -0.28 0.61 0.67 0.56 0.69
0.16 0.31 0.76 0.69 0.73 1.00 0.48 -0.20 -0.20 0.45 0.47 0.62 0.67
0.27 0.17 0.48 0.38 0.48 0.48 1.00 0.11 -0.19 0.20 0.30 0.68 0.60
0.35 0.00 -0.28 -0.14 -0.03 -0.20 0.11 1.00 0.20 0.01 0.11 -0.09 -0.02
0.17 0.15 -0.40 -0.33 -0.28 -0.20 -0.19 0.20 1.00 -0.27 -0.26 -0.12 -0.22
0.23 -0.02 0.73 0.47 0.61 0.45 0.20 0.01 -0.27 1.00 0.72 0.32 0.15
0.30 0.06 0.61 0.66 0.67 0.47 0.30 0.11 -0.26 0.72 1.00 0.32 0.28
0.21 0.22 0.62 0.45 0.56 0.62 0.68 -0.09 -0.12 0.32 0.32 1.00 0.57
0.30 0.36 0.56 0.50 0.69 0.67 0.60 -0.02 -0.22 0.15 0.28 0.57 1.00
"""

# Pearson correlations of log personal minus log surrogate exposure, same order
_ERROR_CORR = """
1.00 0.34 0.41 0.21 0.32 0.06 0.10 0.40 0.08 0.24 0.27 0.17 0.20
0.34 1.00 0.25 0.13 0.37 0.17 0.25 0.51 -0.07 0.19 0.21 0.06 0.27
0.41 0.25 1.00 0.25 0.60 0.20 0.28 0.46 -0.05 0.66 0.73 0.19 0.34
0.21 0.13 0.25 1.00 0.42 0.12 0.11 0.23 -0.10 0.37 0.28 0.27 0.41
0.32 0.37 0.60 0.42 1.00 0.36 0.40 0.53 0.02 0.51 0.58 0.14 0.54
0.06 0.17 0.20 0.12 0.36 1.00 0.19 0.26 0.02 0.16 0.15 0.17 0.14
0.10 0.25 0.28 0.11 0.40 0.19 1.00 0.33 -0.05 0.15 0.24 0.01 0.22
0.40 0.51 0.46 0.23 0.53 0.26 0.33 1.00 0.16 0.36 0.25 0.23 0.36
0.08 -0.07 -0.05 -0.10 0.02 0.02 -0.05 0.16 1.00 -0.16 -0.15 -0.08 -0.15
0.24 0.19 0.66 0.37 0.51 0.16 0.15 0.36 -0.16 1.00 0.69 0.24 0.32
0.27 0.21 0.73 0.28 0.58 0.15 0.24 0.25 -0.15 0.69 1.00 0.21 0.26
0.17 0.06 0.19 0.27 0.14 0.17 0.01 0.23 -0.08 0.24 0.21 1.00 0.10
0.20 0.27 0.34 0.41 0.54 0.14 0.22 0.36 -0.15 0.32 0.26 0.10 1.00
"""

SURROGATE_CORR_TABLE = np.loadtxt(io.StringIO(_SURROGATE_CORR))
ERROR_CORR_TABLE = np.loadtxt(io.StringIO(_ERROR_CORR))

# share of Var(Y) explained by 8*X1 + g*, per scenario
TARGET_R2 = {1: 0.40, 2: 0.60, 3: 0.40, 4: 0.60, 5: 0.42, 6: 0.59, 7: 0.40, 8: 0.58}

# Outcome noise variances hitting TARGET_R2 under the default exposure law,
# from calibrate_sigma_xi2(s, seed=20240101) on 50,000 rows.
FROZEN_SIGMA_XI2 = {
    1: 826.7314416129884,
    2: 367.43619627243936,
    3: 1794.0783237890146,
    4: 797.3681439062289,
    5: 86.27695150973153,
    6: 43.415812536457544,
    7: 108.39513825275802,
    8: 52.328687432365946,
}

BETA0 = 8.0
METHODS = ("slr-true", "slr-uncorrected", "slr-corrected",
           "dml-true", "dml-uncorrected", "dml-corrected")
PILOT_SEED = 0x5EED
MAX_FAILURE_RATE = 0.01
U64 = (1 << 64) - 1


def nearest_correlation(mat, floor=1e-8):
    """Clip eigenvalues at ``floor`` and rescale back to a unit diagonal."""
    mat = 0.5 * (np.asarray(mat, dtype=float) + np.asarray(mat, dtype=float).T)
    vals, vecs = np.linalg.eigh(mat)
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    out = fixed / np.outer(d, d)
    return 0.5 * (out + out.T)


def default_exposure_corr():
    return nearest_correlation(SURROGATE_CORR_TABLE[1:, 1:])


def default_error_corr():
    return nearest_correlation(ERROR_CORR_TABLE[1:, 1:])


def _as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(key=int(seed) & U64))


def _cholesky(Sigma):
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(Sigma)
        if vals.min() < -1e-8 * max(vals.max(), 1.0):
            raise ConfigError("covariance matrix is not positive semidefinite")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


_PILOT_CACHE: dict = {}


def truncation_acceptance(mu, Sigma, draws=10_000):
    """Share of a seeded pilot of MVN draws that land in the positive orthant."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    key = ("accept", mu.tobytes(), Sigma.tobytes(), draws)
    if key not in _PILOT_CACHE:
        rng = _as_generator(PILOT_SEED)
        x = rng.standard_normal((draws, mu.size)) @ _cholesky(Sigma).T + mu
        _PILOT_CACHE[key] = float(np.all(x > 0, axis=1).mean())
    return _PILOT_CACHE[key]


def sample_truncated_mvn(mu, Sigma, count, seed):
    """Rejection sampler for ``MVN(mu, Sigma)`` restricted to all components > 0.

    Returns exactly ``count`` rows in draw order; ``seed`` may be an int or a
    ``numpy.random.Generator`` (which is advanced).
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    accept = truncation_acceptance(mu, Sigma)
    if accept < 1e-3:
        raise InfeasibleTruncationError(
            f"positive-orthant acceptance {accept:.2e} is below 1e-3 for this (mu, Sigma)"
        )
    rng = _as_generator(seed)
    chol = _cholesky(Sigma)
    out = []
    have = 0
    while have < count:
        need = count - have
        batch = int(math.ceil(need / accept * 1.1)) + 16
        x = rng.standard_normal((batch, mu.size)) @ chol.T + mu
        x = x[np.all(x > 0, axis=1)]
        out.append(x[:need])
        have += min(need, x.shape[0])
    return np.vstack(out) if out else np.zeros((0, mu.size))


def error_scales_for_rho(sd_x, rho):
    """Error SDs giving ``corr(X_j, X_j + tau_j) == rho`` under classical error."""
    if not 0 < rho < 1:
        raise ConfigError("rho must lie in (0, 1)")
    return np.asarray(sd_x, dtype=float) * math.sqrt(1.0 - rho**2) / rho


def g_star(scenario, X2, W):
    """Confounding function of the outcome model for ``scenario`` 1-8."""
    X2 = np.asarray(X2, dtype=float)
    W = np.asarray(W, dtype=float)
    x1, w2 = X2[..., 0], W[..., 1]
    if scenario in (1, 2):
        return 1.0 + 22.0 * x1
    if scenario in (3, 4):
        return 1.0 + 12.0 * (x1 + X2[..., 1] + X2[..., 2] + w2)
    if scenario in (5, 6):
        return 1.0 + 16.0 * expit(20.0 * x1 - 0.4)
    if scenario in (7, 8):
        return (1.0 + 8.0 * expit(20.0 * x1 - 0.4) + 8.0 * expit(30.0 * X2[..., 1] - 0.3)
                + 8.0 * expit(500.0 * X2[..., 2] - 0.02) + 8.0 * w2)
    raise ConfigError(f"scenario must be 1-8, got {scenario}")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    rho: float = 0.8
    N: int = 1000
    n: int = 350
    beta0: float = BETA0
    mu: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    err_corr: np.ndarray | None = None
    sigma_xi2: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in TARGET_R2:
            raise ConfigError(f"scenario must be 1-8, got {self.scenario}")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        mu = np.full(12, 3.0) if self.mu is None else np.asarray(self.mu, dtype=float)
        Sigma = default_exposure_corr() if self.Sigma is None else np.asarray(self.Sigma, float)
        err = default_error_corr() if self.err_corr is None else np.asarray(self.err_corr, float)
        for name, m in (("Sigma", Sigma), ("err_corr", err)):
            if m.shape != (mu.size, mu.size):
                raise ConfigError(f"{name} must be {mu.size}x{mu.size}")
            if not np.allclose(m, m.T, atol=1e-12):
                raise ConfigError(f"{name} must be symmetric")
            vals = np.linalg.eigvalsh(m)
            if vals.min() < -1e-8 * max(vals.max(), 1.0):
                raise ConfigError(f"{name} must be positive semidefinite")
        if not np.allclose(np.diag(err), 1.0):
            raise ConfigError("err_corr must have a unit diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "err_corr", err)

    @property
    def noise_variance(self):
        if self.sigma_xi2 is not None:
            return float(self.sigma_xi2)
        frozen = FROZEN_SIGMA_XI2[self.scenario]
        if frozen is None:
            return calibrate_sigma_xi2(self.scenario, self)
        return frozen

    def describe(self):
        return {
            "scenario": self.scenario,
            "rho": self.rho,
            "N": self.N,
            "n": self.n,
            "beta0": self.beta0,
            "sigma_xi2": self.noise_variance,
        }


def _true_exposures(cfg, count, rng):
    X0 = sample_truncated_mvn(cfg.mu, cfg.Sigma, count, rng)
    W1 = rng.uniform(18.0, 91.0, count)
    W2 = rng.binomial(1, 0.16, count).astype(float)
    X = X0.copy()
    X[:, 0] += 0.1 * W2
    return X, np.column_stack([W1, W2])


def exposure_sd(cfg: ScenarioConfig, draws=100_000):
    """SD of each true exposure (after truncation and the W2 shift) from a seeded pilot."""
    key = ("sd", cfg.mu.tobytes(), cfg.Sigma.tobytes(), draws)
    if key not in _PILOT_CACHE:
        X, _ = _true_exposures(cfg, draws, _as_generator(PILOT_SEED + 1))
        _PILOT_CACHE[key] = X.std(axis=0, ddof=1)
    return _PILOT_CACHE[key]


def error_covariance(cfg: ScenarioConfig):
    tau = error_scales_for_rho(exposure_sd(cfg), cfg.rho)
    return tau[:, None] * cfg.err_corr * tau[None, :]


def calibrate_sigma_xi2(scenario, cfg: ScenarioConfig | None = None, rows=50_000,
                        seed=20240101):
    """Noise variance making the outcome R^2 hit the scenario's target."""
    if cfg is None:
        cfg = ScenarioConfig(scenario=scenario, sigma_xi2=1.0)
    X, W = _true_exposures(cfg, rows, _as_generator(seed))
    signal = cfg.beta0 * X[:, 0] + g_star(scenario, X[:, 1:], W)
    r2 = TARGET_R2[scenario]
    return float(signal.var(ddof=1) * (1.0 - r2) / r2)


@dataclass(frozen=True)
class GeneratedStudy:
    ms: MainStudy
    evs: ValidationStudy


def generate_study(cfg: ScenarioConfig, seed) -> GeneratedStudy:
    """Draw a main study (first ``N`` rows) and a disjoint validation study."""
    rng = _as_generator(seed)
    total = cfg.N + cfg.n
    X, W = _true_exposures(cfg, total, rng)
    err = rng.standard_normal((total, X.shape[1])) @ _cholesky(error_covariance(cfg)).T
    Z = X + err
    xi = rng.normal(0.0, math.sqrt(cfg.noise_variance), cfg.N)
    N = cfg.N
    Y = cfg.beta0 * X[:N, 0] + g_star(cfg.scenario, X[:N, 1:], W[:N]) + xi
    ms = MainStudy(Y, Z[:N], W[:N], X_true=X[:N])
    evs = ValidationStudy(X[N:], Z[N:], W[N:])
    return GeneratedStudy(ms, evs)


def replicate_seed(base_seed, r):
    return (int(base_seed) ^ int(r)) & U64


def run_one(cfg: ScenarioConfig, seed, methods=METHODS, K=2,
            learner: LearnerConfig = LearnerConfig()):
    """All requested estimators on one generated study.

    Returns ``{method: (beta, ase)}``; a failed method maps to its error text.
    """
    study = generate_study(cfg, seed)
    model = None
    out = {}
    if any(m.endswith("corrected") and not m.endswith("uncorrected") for m in methods):
        try:
            model = fit_calibration(study.evs)
        except DmlRcError as exc:
            model = exc
    dml_seed = _sub_seed(seed, 7)
    for method in methods:
        estimator, mode = method.split("-")
        try:
            if mode == "corrected" and isinstance(model, Exception):
                raise model
            kwargs = {"mode": mode, "model": model if mode == "corrected" else None}
            if estimator == "dml":
                est = dml_estimate(study.ms, K=K, seed=dml_seed, learner=learner, **kwargs)
            else:
                est = slr_estimate(study.ms, **kwargs)
            out[method] = (est.beta_hat, est.ase)
        except (DmlRcError, np.linalg.LinAlgError) as exc:
            out[method] = f"{type(exc).__name__}: {exc}"
    return out


def _run_task(args):
    cfg, seed, methods, K, learner = args
    return run_one(cfg, seed, methods, K, learner)


METRIC_COLUMNS = ("scenario", "rho", "method", "mode", "R", "failures", "relative_bias",
                  "coverage", "ese", "ase_mean", "ase_ese_ratio", "bias_ratio", "mse_ratio",
                  "degenerate_ase")


def method_metrics(betas, ases, beta0):
    """Relative bias, coverage, ESE and mean ASE over replicates."""
    betas = np.asarray(betas, dtype=float)
    ases = np.asarray(ases, dtype=float)
    R = betas.size
    bias = float(betas.mean() - beta0)
    ese = float(betas.std(ddof=1)) if R >= 2 else float("nan")
    ase_mean = float(ases.mean())
    covered = np.abs(betas - beta0) <= Z975 * ases
    return {
        "R": R,
        "bias": bias,
        "mse": float(np.mean((betas - beta0) ** 2)),
        "relative_bias": bias / beta0,
        "coverage": float(covered.mean()),
        "ese": ese,
        "ase_mean": ase_mean,
        "ase_ese_ratio": ase_mean / ese if ese > 0 else float("nan"),
        "degenerate_ase": bool(np.any(ases <= 1e-12)),
    }


def _ratio(a, b):
    return a / b if b != 0 else float("nan")


@dataclass
class MetricsSummary:
    rows: list
    meta: dict = field(default_factory=dict)

    def row(self, method):
        estimator, mode = method.split("-")
        for r in self.rows:
            if r["method"] == estimator and r["mode"] == mode:
                return r
        raise KeyError(method)

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def aggregate(results, methods, cfg: ScenarioConfig):
    """Bias, coverage, SE and ratio metrics from per-replicate ``{method: (beta, ase)}`` dicts."""
    R = len(results)
    per = {}
    for method in methods:
        ok = [res[method] for res in results if isinstance(res[method], tuple)]
        failures = R - len(ok)
        if failures > MAX_FAILURE_RATE * R:
            first = next(res[method] for res in results if not isinstance(res[method], tuple))
            raise NumericalError(
                f"{method} failed in {failures} of {R} replicates (first: {first})"
            )
        if not ok:
            raise NumericalError(f"{method} produced no estimates")
        betas, ases = zip(*ok)
        m = method_metrics(betas, ases, cfg.beta0)
        m["failures"] = failures
        per[method] = m
    rows = []
    for method in methods:
        estimator, mode = method.split("-")
        m = per[method]
        dml, slr = per.get(f"dml-{mode}"), per.get(f"slr-{mode}")
        both = dml is not None and slr is not None
        rows.append({
            "scenario": cfg.scenario,
            "rho": cfg.rho,
            "method": estimator,
            "mode": mode,
            "R": m["R"],
            "failures": m["failures"],
            "relative_bias": m["relative_bias"],
            "coverage": m["coverage"],
            "ese": m["ese"],
            "ase_mean": m["ase_mean"],
            "ase_ese_ratio": m["ase_ese_ratio"],
            "bias_ratio": _ratio(dml["bias"], slr["bias"]) if both else float("nan"),
            "mse_ratio": _ratio(dml["mse"], slr["mse"]) if both else float("nan"),
            "degenerate_ase": m["degenerate_ase"],
        })
    return rows


def run_replicates(cfg: ScenarioConfig, R, methods=METHODS, base_seed=0, workers=1, K=2,
                   learner: LearnerConfig = LearnerConfig()) -> MetricsSummary:
    """Run ``R`` independent replicates and aggregate their metrics.

    Replicate ``r`` uses seed ``base_seed XOR r``; results are gathered in
    replicate order, so the worker count does not change the output.
    """
    if R < 2:
        raise ConfigError("need at least 2 replicates")
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}")
    # resolve pilots once so workers inherit nothing order dependent
    cfg = _with_noise(cfg)
    tasks = [(cfg, replicate_seed(base_seed, r), methods, K, learner) for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, R // (4 * workers))))
    else:
        results = [_run_task(t) for t in tasks]
    rows = aggregate(results, methods, cfg)
    meta = {"base_seed": int(base_seed), "R": R, "K": K, "learner": learner.to_dict(),
            **cfg.describe()}
    return MetricsSummary(rows, meta)


def _with_noise(cfg):
    if cfg.sigma_xi2 is not None:
        return cfg
    return ScenarioConfig(cfg.scenario, cfg.rho, cfg.N, cfg.n, cfg.beta0, cfg.mu, cfg.Sigma,
                          cfg.err_corr, cfg.noise_variance, cfg.seed)


def _matrix(value, base):
    if value is None:
        return None
    if isinstance(value, str):
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        return np.loadtxt(path, delimiter=",", ndmin=2)
    return np.asarray(value, dtype=float)


def load_scenario_config(path, **overrides):
    """Read a YAML/JSON scenario file; returns ``(ScenarioConfig, replicates or None)``.

    Matrices (``sigma``, ``err_corr``) and ``mu`` may be inline lists or paths
    to CSV files relative to the config file.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario config {path}: {exc}") from exc
    known = {"scenario", "rho", "N", "n", "R", "mu", "sigma", "err_corr", "sigma_xi2", "seed"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown scenario config keys: {sorted(extra)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    base = path.parent
    mu = _matrix(raw.get("mu"), base)
    cfg = ScenarioConfig(
        scenario=int(raw.get("scenario", 1)),
        rho=float(raw.get("rho", 0.8)),
        N=int(raw.get("N", 1000)),
        n=int(raw.get("n", 350)),
        mu=None if mu is None else mu.ravel(),
        Sigma=_matrix(raw.get("sigma"), base),
        err_corr=_matrix(raw.get("err_corr"), base),
        sigma_xi2=None if raw.get("sigma_xi2") is None else float(raw["sigma_xi2"]),
        seed=int(raw.get("seed", 0)),
    )
    R = raw.get("R")
    return cfg, None if R is None else int(R)

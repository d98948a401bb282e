"""Main-study / validation-study analysis: ingestion, preprocessing and reports.

Preprocessing order is fixed: incomplete-row removal, log transform, IQR
outlier removal, then covariate imputation. Every step appends to an audit
so row and cell counts can be reconciled afterwards.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calibration import ValidationStudy, fit_calibration
from .dml import LearnerConfig, MainStudy, _sub_seed, dml_estimate, slr_estimate
from .errors import ConfigError, DataError, DmlRcError
from .learners import DesignSpec

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, CATEGORICAL)
IQR_MULTIPLIER = 3.0
FDR_ALPHA = 0.05
ESTIMATORS = ("slr", "dml")
MODES = ("uncorrected", "corrected")


@dataclass(frozen=True)
class ColumnSchema:
    """Roles of the CSV columns.

    Surrogate exposures use the exposure names in both files; the validation
    file carries the paired true exposures as ``name + true_suffix``.
    """

    outcome: str
    exposures: tuple
    covariates: tuple = ()
    id: str | None = None
    total_mass: str | None = None
    total_mass_error_free: bool = False
    true_suffix: str = "_true"
    log_transform: bool = True

    def __post_init__(self):
        object.__setattr__(self, "exposures", tuple(self.exposures))
        covs = tuple((str(n), str(k)) for n, k in (
            self.covariates.items() if isinstance(self.covariates, dict) else self.covariates))
        object.__setattr__(self, "covariates", covs)
        if not self.exposures:
            raise ConfigError("schema needs at least one exposure")
        for name, kind in covs:
            if kind not in KINDS:
                raise ConfigError(f"covariate {name!r} has kind {kind!r}; use one of {KINDS}")
        names = [self.outcome, *self.exposures, *self.covariate_names]
        names += [n for n in (self.id, self.total_mass) if n]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"schema column names must be unique, repeated: {dup}")
        if not self.true_suffix:
            raise ConfigError("true_suffix must be nonempty")

    @property
    def covariate_names(self):
        return tuple(n for n, _ in self.covariates)

    @property
    def categorical(self):
        return tuple(n for n, k in self.covariates if k == CATEGORICAL)

    @property
    def surrogates(self):
        """Exposure columns present in both files, total mass last."""
        return self.exposures + ((self.total_mass,) if self.total_mass else ())

    def true_name(self, name):
        return name + self.true_suffix

    def required(self, role):
        cols = list(self.surrogates) + list(self.covariate_names)
        if role == "main":
            cols.append(self.outcome)
        elif role == "validation":
            cols += [self.true_name(n) for n in self.exposures]
            if self.total_mass and not self.total_mass_error_free:
                cols.append(self.true_name(self.total_mass))
        else:
            raise ConfigError(f"role must be 'main' or 'validation', got {role!r}")
        return cols

    @classmethod
    def from_dict(cls, d):
        known = {"outcome", "exposures", "covariates", "id", "total_mass",
                 "total_mass_error_free", "true_suffix", "log_transform"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown schema keys: {sorted(extra)}")
        if "outcome" not in d or "exposures" not in d:
            raise ConfigError("schema needs 'outcome' and 'exposures'")
        covs = d.get("covariates") or {}
        if isinstance(covs, list):
            covs = {c: CONTINUOUS for c in covs}
        return cls(
            outcome=str(d["outcome"]),
            exposures=tuple(str(e) for e in d["exposures"]),
            covariates=covs,
            id=d.get("id"),
            total_mass=d.get("total_mass"),
            total_mass_error_free=bool(d.get("total_mass_error_free", False)),
            true_suffix=str(d.get("true_suffix", "_true")),
            log_transform=bool(d.get("log_transform", True)),
        )

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "exposures": list(self.exposures),
            "covariates": dict(self.covariates),
            "id": self.id,
            "total_mass": self.total_mass,
            "total_mass_error_free": self.total_mass_error_free,
            "true_suffix": self.true_suffix,
            "log_transform": self.log_transform,
        }


def load_schema(path) -> ColumnSchema:
    """Read a YAML (or JSON) schema file."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read schema {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"schema {path} must be a mapping")
    return ColumnSchema.from_dict(raw)


@dataclass
class Table:
    """Columns as numpy arrays; numeric missing is NaN, categorical missing is None."""

    columns: dict
    categorical: tuple = ()
    levels: dict = field(default_factory=dict)

    @property
    def n_rows(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def missing(self, name):
        col = self.columns[name]
        if name in self.categorical:
            return np.array([v is None for v in col], dtype=bool)
        return np.isnan(col)

    def take(self, rows):
        rows = np.asarray(rows)
        return Table({k: v[rows] for k, v in self.columns.items()}, self.categorical,
                     dict(self.levels))

    def copy(self):
        return Table({k: v.copy() for k, v in self.columns.items()}, self.categorical,
                     dict(self.levels))


def _levels(values):
    seen = {}
    for v in values:
        if v is not None and v not in seen:
            seen[v] = None
    return list(seen)


def ingest_csv(path, schema: ColumnSchema, role="main") -> Table:
    """Read the columns ``schema`` needs for ``role`` from a UTF-8 CSV file."""
    required = schema.required(role)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            absent = [c for c in required if c not in header]
            if absent:
                raise DataError(f"{path}: missing declared columns {absent}")
            raw = {c: [] for c in required}
            ids = []
            for row in reader:
                for c in required:
                    raw[c].append(row[c])
                if schema.id and schema.id in header:
                    ids.append(row[schema.id])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    cat = set(schema.categorical)
    cols = {}
    for c in required:
        if c in cat:
            cols[c] = np.array([v.strip() or None for v in raw[c]], dtype=object)
            continue
        out = np.empty(len(raw[c]))
        for i, v in enumerate(raw[c]):
            v = v.strip()
            if v == "":
                out[i] = np.nan
                continue
            try:
                out[i] = float(v)
            except ValueError:
                # line numbers count the header as line 1
                raise DataError(
                    f"{path}: unparseable numeric value {v!r} at line {i + 2}, column {c!r}"
                ) from None
        cols[c] = out
    if ids:
        cols[schema.id] = np.array(ids, dtype=object)
        cat.add(schema.id)
    categorical = tuple(c for c in cols if c in cat)
    return Table(cols, categorical, {c: _levels(cols[c]) for c in categorical})


def write_csv(table: Table, path):
    """Write with ``repr`` floats (17 significant digits); missing cells stay empty."""
    names = list(table.columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(table.n_rows):
            row = []
            for c in names:
                v = table.columns[c][i]
                if c in table.categorical:
                    row.append("" if v is None else v)
                else:
                    row.append("" if math.isnan(v) else repr(float(v)))
            w.writerow(row)


def log_transform(table: Table, columns) -> Table:
    """Natural log of ``columns``; missing cells stay missing."""
    out = table.copy()
    offenders = []
    for c in columns:
        x = out.columns[c]
        bad = np.flatnonzero(~np.isnan(x) & (x <= 0))
        offenders += [(int(i), c, float(x[i])) for i in bad]
    if offenders:
        shown = ", ".join(f"row {i} column {c!r} = {v!r}" for i, c, v in offenders[:10])
        more = f" and {len(offenders) - 10} more" if len(offenders) > 10 else ""
        raise DataError(f"log transform needs positive values: {shown}{more}")
    for c in columns:
        out.columns[c] = np.log(out.columns[c])
    return out


def iqr_bounds(values, multiplier=IQR_MULTIPLIER):
    """``[Q1 - k*IQR, Q3 + k*IQR]`` with linearly interpolated quartiles."""
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 4:
        raise DataError(f"IQR rule needs at least 4 non-missing values, got {x.size}")
    q1, q3 = np.quantile(x, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return float(q1 - multiplier * iqr), float(q3 + multiplier * iqr)


def remove_outliers(table: Table, columns, policy="drop_row", multiplier=IQR_MULTIPLIER):
    """Apply the IQR rule to ``columns``.

    ``drop_row`` removes a row when any listed column falls outside its
    bounds; ``drop_cell`` only marks the offending cell missing. Bounds are
    computed on the input table for every column before anything is removed.
    Returns ``(table, audit)``.
    """
    if policy not in ("drop_row", "drop_cell"):
        raise ConfigError(f"unknown outlier policy {policy!r}")
    columns = list(columns)
    bounds = {}
    flags = {}
    for c in columns:
        try:
            lo, hi = iqr_bounds(table.columns[c], multiplier)
        except DataError as exc:
            raise DataError(f"column {c!r}: {exc}") from None
        x = table.columns[c]
        bounds[c] = [lo, hi]
        flags[c] = ~np.isnan(x) & ((x < lo) | (x > hi))
    audit = {"policy": policy, "bounds": bounds,
             "cells": {c: int(f.sum()) for c, f in flags.items()}}
    if policy == "drop_row":
        drop = np.zeros(table.n_rows, dtype=bool)
        for f in flags.values():
            drop |= f
        audit["rows_dropped"] = int(drop.sum())
        return table.take(np.flatnonzero(~drop)), audit
    out = table.copy()
    for c, f in flags.items():
        out.columns[c][f] = np.nan
    audit["rows_dropped"] = 0
    return out, audit


def _mode(values, levels):
    counts = {lv: 0 for lv in levels}
    for v in values:
        if v is not None:
            counts[v] += 1
    # max keeps the first of tied levels, which is first appearance
    return max(levels, key=lambda lv: counts[lv])


def impute(table: Table, schema: ColumnSchema, columns=None):
    """Mean (continuous) or mode (categorical) imputation with missing indicators.

    A covariate with any missing cell gains a 0/1 column ``name_missing``.
    Returns ``(table, audit)``; ``audit["indicators"]`` lists the new columns.
    """
    out = table.copy()
    audit = {"imputed": {}, "indicators": [], "fill": {}}
    kinds = dict(schema.covariates)
    for name in (schema.covariate_names if columns is None else columns):
        miss = out.missing(name)
        k = int(miss.sum())
        audit["imputed"][name] = k
        if k == 0:
            continue
        if k == miss.size:
            raise DataError(f"covariate {name!r} is entirely missing and cannot be imputed")
        if kinds.get(name) == CATEGORICAL:
            fill = _mode(out.columns[name], out.levels[name])
        else:
            fill = float(np.mean(out.columns[name][~miss]))
        out.columns[name][miss] = fill
        ind = f"{name}_missing"
        out.columns[ind] = miss.astype(float)
        audit["indicators"].append(ind)
        audit["fill"][name] = fill
    return out, audit


def _round_up(frac):
    # rounding toward +inf keeps q <= alpha exactly equivalent to p <= k*alpha/m
    f = float(frac)
    return float(np.nextafter(f, np.inf)) if Fraction(f) < frac else f


def bh_adjust(pvalues):
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1:
        raise ConfigError("p-values must be a vector")
    if p.size == 0:
        return p.copy()
    if np.isnan(p).any() or np.any((p < 0) | (p > 1)):
        raise ConfigError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    q = np.array([_round_up(Fraction(x) * m / k) for k, x in enumerate(p[order], 1)])
    q = np.minimum.accumulate(q[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


def _column_audit(table_before: Table, table_after: Table, columns, outlier_cells, imputed):
    res = {}
    for c in columns:
        res[c] = {
            "missing_in": int(table_before.missing(c).sum()),
            "outlier_cells": int(outlier_cells.get(c, 0)),
            "imputed": int(imputed.get(c, 0)),
            "missing_out": int(table_after.missing(c).sum()),
        }
    return res


def preprocess_table(table: Table, schema: ColumnSchema, role="main"):
    """Clean one study table. Returns ``(table, audit)``.

    Per-column counts in the audit refer to the rows that survive row-level
    filtering, so ``missing_out == missing_in + outlier_cells - imputed``.
    """
    rows_in = table.n_rows
    surrogates = list(schema.surrogates)
    complete = np.ones(rows_in, dtype=bool)
    for c in surrogates + ([schema.outcome] if role == "main" else []):
        complete &= ~table.missing(c)
    t = table.take(np.flatnonzero(complete))
    dropped_incomplete = int(rows_in - t.n_rows)

    true_cols = []
    if role == "validation":
        true_cols = [schema.true_name(n) for n in schema.exposures]
        if schema.total_mass and not schema.total_mass_error_free:
            true_cols.append(schema.true_name(schema.total_mass))
    if schema.log_transform:
        t = log_transform(t, surrogates + true_cols)
    t, row_audit = remove_outliers(t, surrogates, "drop_row")
    start = t
    cell_audit = {"cells": {}, "bounds": {}}
    if true_cols:
        t, cell_audit = remove_outliers(t, true_cols, "drop_cell")
    t, imp_audit = impute(t, schema)
    tracked = true_cols + list(schema.covariate_names)
    audit = {
        "role": role,
        "rows_in": rows_in,
        "rows_dropped_incomplete": dropped_incomplete,
        "rows_dropped_outlier": row_audit["rows_dropped"],
        "rows_dropped": dropped_incomplete + row_audit["rows_dropped"],
        "rows_out": t.n_rows,
        "log_transformed": surrogates + true_cols if schema.log_transform else [],
        "outlier_bounds": {**row_audit["bounds"], **cell_audit["bounds"]},
        "outlier_rows_by_column": row_audit["cells"],
        "columns": _column_audit(start, t, tracked, cell_audit["cells"], imp_audit["imputed"]),
        "indicators": imp_audit["indicators"],
        "imputation_fill": {k: v for k, v in imp_audit["fill"].items()},
        "imputation_order": "after_outlier_removal",
    }
    return t, audit


def _encode(table: Table, schema: ColumnSchema, levels, indicators):
    cols, names = [], []
    n = table.n_rows
    for name, kind in schema.covariates:
        if kind == CATEGORICAL:
            vals = table.columns[name]
            for lv in levels[name][1:]:
                cols.append(np.array([v == lv for v in vals], dtype=float))
                names.append(f"{name}={lv}")
        else:
            cols.append(table.columns[name])
            names.append(name)
    for ind in indicators:
        cols.append(table.columns.get(ind, np.zeros(n)))
        names.append(ind)
    W = np.column_stack(cols) if cols else np.zeros((n, 0))
    return W, names


def encode_covariates(ms: Table, evs: Table, schema: ColumnSchema, indicators):
    """Reference-coded covariate matrices sharing one column layout.

    The reference level of a categorical covariate is its first appearance
    across the main then the validation table.
    """
    levels = {name: _levels(list(ms.columns[name]) + list(evs.columns[name]))
              for name in schema.categorical}
    W_ms, names = _encode(ms, schema, levels, indicators)
    W_evs, _ = _encode(evs, schema, levels, indicators)
    return W_ms, W_evs, names, levels


def _varying(W):
    if W.shape[0] == 0:
        return np.zeros(W.shape[1], dtype=bool)
    return np.ptp(W, axis=0) > 0


@dataclass
class PreparedData:
    ms: MainStudy
    evs: ValidationStudy
    exposure_names: tuple
    covariate_names: tuple
    calibration_covariate_names: tuple
    audit: dict
    meta: dict


def prepare(ms_table: Table, evs_table: Table, schema: ColumnSchema) -> PreparedData:
    """Preprocess both tables and assemble the numeric study objects.

    Exposures are ordered by name so results do not depend on column order.
    Total mass is a calibrated exposure unless flagged error-free, in which
    case its log enters the covariates.
    """
    ms_t, ms_audit = preprocess_table(ms_table, schema, "main")
    evs_t, evs_audit = preprocess_table(evs_table, schema, "validation")
    indicators = sorted(set(ms_audit["indicators"]) | set(evs_audit["indicators"]))
    W_ms, W_evs, w_names, levels = encode_covariates(ms_t, evs_t, schema, indicators)

    exposures = sorted(schema.exposures)
    tm_mode = "absent"
    if schema.total_mass:
        if schema.total_mass_error_free:
            tm_mode = "error_free"
            W_ms = np.column_stack([W_ms, ms_t.columns[schema.total_mass]])
            W_evs = np.column_stack([W_evs, evs_t.columns[schema.total_mass]])
            w_names = w_names + [schema.total_mass]
        else:
            tm_mode = "calibrated"
            exposures.append(schema.total_mass)
    Z_ms = np.column_stack([ms_t.columns[n] for n in exposures])
    Z_evs = np.column_stack([evs_t.columns[n] for n in exposures])
    X_evs = np.column_stack([evs_t.columns[schema.true_name(n)] for n in exposures])

    # a covariate constant in one study carries no information there
    keep_ms = _varying(W_ms)
    keep_cal = _varying(W_evs)
    meta = {
        "exposure_order": list(exposures),
        "total_mass": tm_mode,
        "categorical_levels": levels,
        "categorical_coding": "reference level = first appearance",
        "covariates_dropped_constant_main": [n for n, k in zip(w_names, keep_ms) if not k],
        "covariates_dropped_constant_validation": [
            n for n, k in zip(w_names, keep_cal) if not k],
    }
    ms = MainStudy(ms_t.columns[schema.outcome], Z_ms, W_ms[:, keep_ms],
                   W_cal=W_ms[:, keep_cal])
    evs = ValidationStudy(X_evs, Z_evs, W_evs[:, keep_cal])
    names = tuple(n for n, k in zip(w_names, keep_ms) if k)
    cal_names = tuple(n for n, k in zip(w_names, keep_cal) if k)
    return PreparedData(ms, evs, tuple(exposures), names, cal_names,
                        {"main": ms_audit, "validation": evs_audit}, meta)


def method_labels(methods, interactions=False, single_pollutant=False):
    """Result columns as ``{slr|dml}-{mode}-{variant}``."""
    labels = []
    for m in methods:
        est, mode = _parse_method(m)
        labels.append((f"{est}-{mode}-multi-main", est, mode, "multi", False))
        if interactions and est == "dml":
            labels.append((f"{est}-{mode}-multi-interaction", est, mode, "multi", True))
        if single_pollutant:
            labels.append((f"{est}-{mode}-single", est, mode, "single", False))
    return labels


def _parse_method(m):
    parts = str(m).strip().lower().split("-")
    if len(parts) != 2 or parts[0] not in ESTIMATORS or parts[1] not in MODES:
        raise ConfigError(
            f"method {m!r} must look like '<slr|dml>-<uncorrected|corrected>'"
        )
    return parts[0], parts[1]


def constituent_seed(seed, name):
    return _sub_seed(seed, zlib.crc32(name.encode("utf-8")))


@dataclass
class AnalysisReport:
    constituents: list
    labels: list
    audit: dict
    calibration: dict | None
    meta: dict

    @property
    def failures(self):
        return [(c["name"], lab) for c in self.constituents for lab in c["failures"]]

    @property
    def exit_code(self):
        return 5 if self.failures else 0

    def to_dict(self):
        return {
            "meta": self.meta,
            "methods": list(self.labels),
            "constituents": self.constituents,
            "calibration": self.calibration,
            "audit": self.audit,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _run_label(data: PreparedData, model, est, mode, variant, interactions, focus, seed, K,
               learner):
    n_exp = len(data.exposure_names)
    if variant == "single":
        # only total mass, which is always the last exposure column
        calibrated_mass = data.meta["total_mass"] == "calibrated"
        confounders = [n_exp - 1] if calibrated_mass and focus != n_exp - 1 else []
    else:
        confounders = [j for j in range(n_exp) if j != focus]
    spec = DesignSpec(tuple(data.exposure_names[j] for j in confounders),
                      data.covariate_names, interactions)
    kwargs = {"mode": mode, "model": model if mode == "corrected" else None,
              "focus": focus, "confounders": confounders}
    if est == "dml":
        return dml_estimate(data.ms, spec, K=K, seed=seed, learner=learner, **kwargs)
    return slr_estimate(data.ms, spec, **kwargs)


def multi_pollutant_analyze(ms_table: Table, evs_table: Table, schema: ColumnSchema,
                            methods=("dml-corrected",), seed=0, interactions=False,
                            single_pollutant=False, K=2,
                            learner: LearnerConfig = LearnerConfig(),
                            diagnostics=False) -> AnalysisReport:
    """Estimate each constituent's effect in turn, adjusting for the others.

    The calibration model is fitted once and shared. BH adjustment is done
    separately for every result column over the constituents that produced
    an estimate.
    """
    labels = method_labels(methods, interactions, single_pollutant)
    data = prepare(ms_table, evs_table, schema)
    needs_model = any(mode == "corrected" for _, _, mode, _, _ in labels)
    model = fit_calibration(data.evs) if needs_model else None
    exposures = data.exposure_names
    constituents = []
    for name in sorted(schema.exposures):
        focus = exposures.index(name)
        cseed = constituent_seed(seed, name)
        entry = {"name": name, "seed": cseed, "results": {}, "failures": {}}
        for label, est, mode, variant, inter in labels:
            try:
                res = _run_label(data, model, est, mode, variant, inter, focus, cseed, K,
                                 learner)
            except DmlRcError as exc:
                entry["failures"][label] = f"{type(exc).__name__}: {exc}"
                continue
            entry["results"][label] = res.to_dict(diagnostics=diagnostics)
        constituents.append(entry)
    for label, *_ in labels:
        have = [c for c in constituents if label in c["results"]]
        adj = bh_adjust([c["results"][label]["p"] for c in have])
        for c, q in zip(have, adj):
            c["results"][label]["p_adjusted"] = float(q)
            c["results"][label]["significant"] = bool(q <= FDR_ALPHA)
    meta = {
        "version": __version__,
        "seed": int(seed),
        "K": K,
        "learner": learner.to_dict(),
        "fdr_alpha": FDR_ALPHA,
        "n_main": data.ms.N,
        "n_validation": data.evs.n,
        "covariates": list(data.covariate_names),
        "calibration_covariates": list(data.calibration_covariate_names),
        "design": {
            "iqr_quantile": "linear interpolation",
            "iqr_multiplier": IQR_MULTIPLIER,
            "imputation_order": "after_outlier_removal",
            "calibration_missing_policy": "complete",
            "log_transform": schema.log_transform,
            **data.meta,
        },
    }
    calibration = None
    if model is not None:
        calibration = {"exposures": list(exposures), "covariates":
                       list(data.calibration_covariate_names), **model.to_dict()}
    return AnalysisReport(constituents, [lab for lab, *_ in labels], data.audit, calibration,
                          meta)


def calibrate_file(validation_path, schema: ColumnSchema):
    """Fit the calibration model from a validation CSV alone."""
    evs_t, audit = preprocess_table(ingest_csv(validation_path, schema, "validation"), schema,
                                    "validation")
    W, names, _ = _calibration_covariates(evs_t, schema, audit["indicators"])
    exposures = sorted(schema.exposures)
    if schema.total_mass:
        if schema.total_mass_error_free:
            W = np.column_stack([W, evs_t.columns[schema.total_mass]])
            names = names + [schema.total_mass]
        else:
            exposures.append(schema.total_mass)
    keep = _varying(W)
    evs = ValidationStudy(
        np.column_stack([evs_t.columns[schema.true_name(n)] for n in exposures]),
        np.column_stack([evs_t.columns[n] for n in exposures]),
        W[:, keep],
    )
    model = fit_calibration(evs)
    meta = dict(model.meta)
    meta.update({"version": __version__, "exposures": list(exposures),
                 "covariates": [n for n, k in zip(names, keep) if k], "audit": audit})
    return type(model)(model.theta, model.sigma2, model.var_theta, model.p, model.q, model.n,
                       meta)


def _calibration_covariates(table, schema, indicators):
    levels = {name: _levels(table.columns[name]) for name in schema.categorical}
    W, names = _encode(table, schema, levels, indicators)
    return W, names, levels

"""Synthetic main/validation tables for pipeline tests."""
import numpy as np

from dmlrc.pipeline import ColumnSchema, Table


def pipeline_schema(exposures=("A", "B"), total_mass=None, error_free=False):
    return ColumnSchema(
        outcome="y",
        exposures=tuple(exposures),
        covariates={"age": "continuous", "smoke": "categorical"},
        id="id",
        total_mass=total_mass,
        total_mass_error_free=error_free,
    )


def pipeline_tables(seed, N=600, n=200, exposures=("A", "B"), effect=None, total_mass=None,
                    missing_rate=0.0, error_sd=0.3):
    """Log-normal exposures; ``effect`` maps exposure name to its log-scale slope."""
    rng = np.random.default_rng(seed)
    names = list(exposures) + ([total_mass] if total_mass else [])
    d = len(names)
    corr = 0.3 * np.ones((d, d)) + 0.7 * np.eye(d)
    effect = {exposures[0]: 1.0} if effect is None else effect

    def draw(m):
        X = rng.multivariate_normal(np.zeros(d), 0.25 * corr, size=m)
        Z = X + rng.normal(0.0, error_sd, size=(m, d))
        age = rng.uniform(40, 80, m)
        smoke = rng.choice(["never", "past", "current"], size=m, p=[0.5, 0.3, 0.2])
        return X, Z, age, smoke

    def base_cols(Z, age, smoke, m, offset):
        cols = {"id": np.array([f"r{offset + i}" for i in range(m)], dtype=object)}
        for j, nm in enumerate(names):
            cols[nm] = np.exp(Z[:, j])
        age = age.copy()
        smoke = smoke.astype(object)
        if missing_rate > 0:
            age[rng.random(m) < missing_rate] = np.nan
            smoke[rng.random(m) < missing_rate] = None
        cols["age"] = age
        cols["smoke"] = smoke
        return cols

    X, Z, age, smoke = draw(N)
    y = sum(effect.get(nm, 0.0) * X[:, j] for j, nm in enumerate(names))
    y = y + 0.02 * age + 0.3 * (smoke == "current") + rng.normal(0.0, 1.0, N)
    ms = base_cols(Z, age, smoke, N, 0)
    ms["y"] = y
    Xv, Zv, agev, smokev = draw(n)
    evs = base_cols(Zv, agev, smokev, n, N)
    for j, nm in enumerate(names):
        evs[nm + "_true"] = np.exp(Xv[:, j])

    def table(cols):
        cat = ("id", "smoke")
        levels = {c: list(dict.fromkeys(v for v in cols[c] if v is not None)) for c in cat}
        return Table(cols, cat, levels)

    return table(ms), table(evs)

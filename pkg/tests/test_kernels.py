import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmlrc import _cd_py, _kernels

ext = pytest.importorskip("dmlrc._cd_ext", reason="compiled kernel not built")


def problem(rng, n=80, p=12):
    X = rng.normal(size=(n, p))
    X[:, 1] = X[:, 0] + 0.1 * rng.normal(size=n)
    X = (X - X.mean(0)) / X.std(0)
    y = X[:, :3] @ [2.0, -1.0, 0.5] + rng.normal(size=n)
    gram, corr = X.T @ X / n, X.T @ (y - y.mean()) / n
    lam_max = np.abs(corr).max()
    return gram, corr, lam_max * np.geomspace(1, 1e-3, 30)


def run(fn, gram, corr, lambdas, tol=1e-10, sweeps=10_000):
    beta = np.zeros(corr.size)
    path, used, failed = fn(gram, corr, lambdas, beta, tol, sweeps)
    return path, used, failed, beta


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_backends_agree(seed):
    gram, corr, lambdas = problem(np.random.default_rng(seed))
    a = run(_cd_py.cd_path, gram, corr, lambdas)
    b = run(ext.cd_path, gram, corr, lambdas)
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2] == b[2] == -1
    # the start vector is updated in place to the last solution
    np.testing.assert_array_equal(a[3], a[0][-1])
    np.testing.assert_array_equal(b[3], b[0][-1])


def test_backends_agree_on_sweep_limit(rng):
    gram, corr, lambdas = problem(rng)
    a = run(_cd_py.cd_path, gram, corr, lambdas, tol=1e-14, sweeps=3)
    b = run(ext.cd_path, gram, corr, lambdas, tol=1e-14, sweeps=3)
    assert a[2] == b[2] >= 0
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)


def test_warm_start_and_zero_diagonal(rng):
    gram, corr, lambdas = problem(rng)
    gram[4, :] = gram[:, 4] = 0.0
    corr[4] = 0.0
    for fn in (_cd_py.cd_path, ext.cd_path):
        cold = run(fn, gram, corr, lambdas)[0][-1]
        beta = cold + 0.01
        beta[4] = 0.0
        path, _, failed = fn(gram, corr, lambdas[-1:], beta, 1e-12, 10_000)
        assert failed == -1
        np.testing.assert_allclose(path[0], cold, atol=1e-9)
        assert path[0][4] == 0.0


def test_solution_satisfies_kkt(rng):
    gram, corr, lambdas = problem(rng)
    path = run(ext.cd_path, gram, corr, lambdas, tol=1e-13)[0]
    for lam, b in zip(lambdas, path):
        grad = corr - gram @ b
        active = b != 0
        np.testing.assert_allclose(grad[active], lam * np.sign(b[active]), atol=1e-9)
        assert np.all(np.abs(grad[~active]) <= lam + 1e-9)


def test_default_backend_is_compiled():
    if os.environ.get("DMLRC_PURE_PYTHON", "") not in ("", "0"):
        pytest.skip("fallback forced by environment")
    assert _kernels.BACKEND == "cython"
    assert _kernels.cd_path is ext.cd_path


def test_environment_forces_fallback():
    code = "from dmlrc import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, DMLRC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True)
    assert out.stdout.strip() == "python"

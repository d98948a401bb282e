"""Pure-Python coordinate descent for the LASSO (fallback backend).

Mirrors ``_cd_ext.pyx`` line for line; both must return identical paths
up to floating point reassociation.
"""
import numpy as np


def cd_path(gram, corr, lambdas, beta, tol, max_sweeps):
    """Run covariance-update coordinate descent down a penalty path.

    Minimises ``0.5 * b'Gb - c'b + lam * |b|_1`` for each ``lam`` in turn,
    warm-starting from the previous solution. ``beta`` is the initial point
    and is updated in place.

    Returns ``(path, sweeps, failed)`` where ``failed`` is the index of the
    first penalty that hit ``max_sweeps`` or -1.
    """
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    p = corr.shape[0]
    path = np.zeros((lambdas.shape[0], p))
    sweeps = np.zeros(lambdas.shape[0], dtype=np.int64)
    diag = gram.diagonal().tolist()
    # q = G @ beta, kept in sync with every coordinate move
    q = gram @ beta
    for li in range(lambdas.shape[0]):
        lam = float(lambdas[li])
        it = 0
        while True:
            it += 1
            max_delta = 0.0
            for k in range(p):
                gkk = diag[k]
                if gkk <= 0.0:
                    continue
                old = beta[k]
                z = corr[k] - q[k] + gkk * old
                if z > lam:
                    new = (z - lam) / gkk
                elif z < -lam:
                    new = (z + lam) / gkk
                else:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    beta[k] = new
                    q += gram[:, k] * delta
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
            if max_delta < tol:
                break
            if it >= max_sweeps:
                path[li] = beta
                sweeps[li] = it
                return path, sweeps, li
        path[li] = beta
        sweeps[li] = it
    return path, sweeps, -1

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled coordinate descent for the LASSO. See ``_cd_py`` for the contract."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def cd_path(gram, corr, lambdas, cnp.ndarray[cnp.float64_t, ndim=1] beta,
            double tol, long max_sweeps):
    cdef double[:, ::1] G = np.ascontiguousarray(gram, dtype=np.float64)
    cdef double[::1] c = np.ascontiguousarray(corr, dtype=np.float64)
    cdef double[::1] lams = np.ascontiguousarray(lambdas, dtype=np.float64)
    cdef double[::1] b = beta
    cdef Py_ssize_t p = c.shape[0]
    cdef Py_ssize_t nl = lams.shape[0]
    path_arr = np.zeros((nl, p))
    sweeps_arr = np.zeros(nl, dtype=np.int64)
    cdef double[:, ::1] path = path_arr
    cdef long long[::1] sweeps = sweeps_arr
    cdef double[::1] q = np.zeros(p)
    cdef Py_ssize_t i, k, li
    cdef long it
    cdef double lam, gkk, old, z, new, delta, max_delta

    # q = G b, but accumulated column-wise in the same order as the updates
    for k in range(p):
        if b[k] != 0.0:
            for i in range(p):
                q[i] += G[i, k] * b[k]

    for li in range(nl):
        lam = lams[li]
        it = 0
        while True:
            it += 1
            max_delta = 0.0
            for k in range(p):
                gkk = G[k, k]
                if gkk <= 0.0:
                    continue
                old = b[k]
                z = c[k] - q[k] + gkk * old
                if z > lam:
                    new = (z - lam) / gkk
                elif z < -lam:
                    new = (z + lam) / gkk
                else:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    b[k] = new
                    for i in range(p):
                        q[i] += G[i, k] * delta
                    if fabs(delta) > max_delta:
                        max_delta = fabs(delta)
            if max_delta < tol:
                break
            if it >= max_sweeps:
                path[li, :] = b
                sweeps[li] = it
                return path_arr, sweeps_arr, li
        path[li, :] = b
        sweeps[li] = it
    return path_arr, sweeps_arr, -1

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; the numpy fallback in ``_kernels_py`` mirrors each one."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def zbuffer(pix, depth, Py_ssize_t n_pix):
    cdef const cnp.int64_t[:] p = np.ascontiguousarray(pix, dtype=np.int64)
    cdef const double[:] d = np.ascontiguousarray(depth, dtype=np.float64)
    winner_arr = np.full(n_pix, -1, dtype=np.int64)
    best_arr = np.full(n_pix, np.inf)
    cdef cnp.int64_t[:] winner = winner_arr
    cdef double[:] best = best_arr
    cdef Py_ssize_t i, k, n = p.shape[0]
    with nogil:
        for i in range(n):
            k = p[i]
            if d[i] < best[k]:
                best[k] = d[i]
                winner[k] = i
    return winner_arr, best_arr


def fuse_scores(lt, lf, lr):
    cdef const double[:, :] t = np.ascontiguousarray(lt, dtype=np.float64)
    cdef const double[:, :] f = np.ascontiguousarray(lf, dtype=np.float64)
    cdef const double[:, :] r = np.ascontiguousarray(lr, dtype=np.float64)
    cdef Py_ssize_t nx = t.shape[1], ny = t.shape[0], nz = f.shape[0]
    out_arr = np.empty(nx * ny * nz)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, j, k, idx = 0
    cdef double a
    with nogil:
        for i in range(nx):
            for j in range(ny):
                a = t[j, i]
                for k in range(nz):
                    out[idx] = (a + f[k, i]) + r[k, j]
                    idx += 1
    return out_arr

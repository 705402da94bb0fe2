# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np

from libc.math cimport exp, fabs

cdef double TINY = 1e-300


def filter_forward(const double[::1] times, const long long[::1] phase_idx,
                   const long long[::1] outcome, double t_start,
                   const double[::1] prior, const double[::1] lam,
                   const double[:, ::1] V, const double[:, ::1] W,
                   const double[:, :, ::1] table):
    cdef Py_ssize_t n = times.shape[0], D = prior.shape[0]
    cdef Py_ssize_t i, a, b
    out_arr = np.zeros((n, D))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] p = np.array(prior, dtype=float)
    cdef double[::1] y = np.empty(D)
    cdef double dt, z, acc, t_prev = t_start
    for i in range(n):
        dt = times[i] - t_prev
        if dt > 0:
            for a in range(D):
                acc = 0.0
                for b in range(D):
                    acc += W[a, b] * p[b]
                y[a] = exp(lam[a] * dt) * acc
            for a in range(D):
                acc = 0.0
                for b in range(D):
                    acc += V[a, b] * y[b]
                p[a] = acc if acc > 0.0 else 0.0
        t_prev = times[i]
        z = 0.0
        for a in range(D):
            p[a] = p[a] * table[phase_idx[i], outcome[i], a]
            z += p[a]
        if not z >= TINY:
            return out_arr, i
        for a in range(D):
            p[a] = p[a] / z
            out[i, a] = p[a]
    return out_arr, -1


def fixed_point(log_products, seed, Py_ssize_t iterations):
    L_arr = np.ascontiguousarray(log_products, dtype=float)
    cdef Py_ssize_t M = L_arr.shape[0], D = L_arr.shape[1]
    cdef Py_ssize_t k, w, a
    P_arr = np.array(seed, dtype=float)
    tv_arr = np.zeros(iterations)
    if M == 0:
        return P_arr, tv_arr, -1
    Pi_arr = np.exp(L_arr - L_arr.max(axis=1, keepdims=True))
    cdef double[:, ::1] Pi = Pi_arr
    cdef double[::1] P = P_arr
    cdef double[::1] tv = tv_arr
    cdef double[::1] new = np.empty(D)
    cdef double z, s, d
    for k in range(iterations):
        for a in range(D):
            new[a] = 0.0
        for w in range(M):
            z = 0.0
            for a in range(D):
                z += Pi[w, a] * P[a]
            if not z >= TINY:
                return P_arr, tv_arr, w
            for a in range(D):
                new[a] += Pi[w, a] / z
        s = 0.0
        for a in range(D):
            new[a] = P[a] * new[a] / M
            s += new[a]
        d = 0.0
        for a in range(D):
            new[a] = new[a] / s
            d += fabs(new[a] - P[a])
            P[a] = new[a]
        tv[k] = 0.5 * d
    return P_arr, tv_arr, -1

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequential kernels. Same operation order as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def gae(const double[::1] rewards, const double[::1] values, const double[::1] next_values,
        const unsigned char[::1] terminals, const unsigned char[::1] ends,
        double gamma, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    cdef Py_ssize_t t
    cdef double running = 0.0
    cdef double delta, boot
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] adv = out
    for t in range(n - 1, -1, -1):
        if ends[t]:
            running = 0.0
        boot = 0.0 if terminals[t] else next_values[t]
        delta = rewards[t] + gamma * boot - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return out


def segment_vex(const double[::1] returns, const double[::1] values,
                const long long[::1] starts, const long long[::1] ends, double tol):
    cdef Py_ssize_t nseg = starts.shape[0]
    cdef Py_ssize_t k, t, a, b
    cdef double mean, ss_res, ss_tot, d
    vex_arr = np.zeros(nseg, dtype=np.float64)
    valid_arr = np.zeros(nseg, dtype=np.uint8)
    cdef double[::1] vex = vex_arr
    cdef unsigned char[::1] valid = valid_arr
    for k in range(nseg):
        a = starts[k]
        b = ends[k]
        if b - a + 1 < 2:
            continue
        mean = 0.0
        for t in range(a, b + 1):
            mean += returns[t]
        mean = mean / (b - a + 1)
        ss_res = 0.0
        ss_tot = 0.0
        for t in range(a, b + 1):
            d = returns[t] - values[t]
            ss_res += d * d
            d = returns[t] - mean
            ss_tot += d * d
        if ss_tot < tol:
            continue
        vex[k] = 1.0 - ss_res / ss_tot
        valid[k] = 1
    return vex_arr, valid_arr


def adam(const double[::1] p, const double[::1] g, const double[::1] m, const double[::1] v,
         double lr, double b1, double b2, double eps, double c1, double c2):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double mi, vi, gi
    p_arr = np.empty(n, dtype=np.float64)
    m_arr = np.empty(n, dtype=np.float64)
    v_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] po = p_arr
    cdef double[::1] mo = m_arr
    cdef double[::1] vo = v_arr
    cdef double a1 = 1.0 - b1
    cdef double a2 = 1.0 - b2
    for i in range(n):
        gi = g[i]
        mi = b1 * m[i] + a1 * gi
        vi = b2 * v[i] + a2 * (gi * gi)
        mo[i] = mi
        vo[i] = vi
        po[i] = p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps)
    return p_arr, m_arr, v_arr


def aux_losses(const double[:, ::1] out, const long long[::1] idx, const double[::1] vex,
               const unsigned char[::1] vex_valid, const double[:, ::1] unit,
               const unsigned char[::1] fs_valid, double c_ve, double c_fs,
               Py_ssize_t ve_col, Py_ssize_t fs_col, double eps):
    cdef Py_ssize_t m = out.shape[0]
    cdef Py_ssize_t s = unit.shape[1]
    cdef Py_ssize_t i, j, t
    cdef Py_ssize_t n_ve = 0, n_fs = 0
    cdef double ve_sum = 0.0, fs_sum = 0.0
    cdef double diff, pn, a, dot, cos, along, w, k_ve, k_fs
    d_arr = np.zeros((m, out.shape[1]), dtype=np.float64)
    cdef double[:, ::1] d = d_arr
    for i in range(m):
        t = idx[i]
        if ve_col >= 0 and vex_valid[t]:
            n_ve += 1
        if fs_col >= 0 and fs_valid[t]:
            n_fs += 1
    if n_ve > 0:
        k_ve = c_ve * (2.0 / n_ve)
        for i in range(m):
            t = idx[i]
            if vex_valid[t]:
                diff = out[i, ve_col] - vex[t]
                ve_sum += diff * diff
                d[i, ve_col] = k_ve * diff
    if n_fs > 0:
        w = 1.0 / n_fs
        k_fs = c_fs * w
        for i in range(m):
            t = idx[i]
            if not fs_valid[t]:
                continue
            pn = 0.0
            dot = 0.0
            for j in range(s):
                pn += out[i, fs_col + j] * out[i, fs_col + j]
                dot += out[i, fs_col + j] * unit[t, j]
            pn = sqrt(pn)
            a = pn + eps
            cos = dot / a
            fs_sum += 1.0 - cos
            along = cos / (a * pn) if pn > 0.0 else 0.0
            for j in range(s):
                d[i, fs_col + j] = k_fs * (along * out[i, fs_col + j] - unit[t, j] / a)
    return (ve_sum / n_ve if n_ve > 0 else 0.0), (fs_sum / n_fs if n_fs > 0 else 0.0), d_arr

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequential scan kernels; drop-in for the numpy pair in backend.py."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def scan_forward(double[:, :, ::1] abar, double[:, :, ::1] bu, double[:, ::1] c):
    cdef Py_ssize_t t_len = abar.shape[0]
    cdef Py_ssize_t p_len = abar.shape[1]
    cdef Py_ssize_t n_len = abar.shape[2]
    y_arr = np.empty((t_len, p_len), dtype=np.float64)
    h_arr = np.empty((t_len, p_len, n_len), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, :, ::1] h = h_arr
    cdef Py_ssize_t t, p, n
    cdef double prev, s, acc
    for t in range(t_len):
        for p in range(p_len):
            acc = 0.0
            for n in range(n_len):
                prev = h[t - 1, p, n] if t > 0 else 0.0
                s = abar[t, p, n] * prev + bu[t, p, n]
                h[t, p, n] = s
                acc += c[t, n] * s
            y[t, p] = acc
    return y_arr, h_arr


def scan_backward(double[:, :, ::1] abar, double[:, ::1] c,
                  double[:, :, ::1] h, double[:, ::1] gy):
    cdef Py_ssize_t t_len = abar.shape[0]
    cdef Py_ssize_t p_len = abar.shape[1]
    cdef Py_ssize_t n_len = abar.shape[2]
    gabar_arr = np.empty((t_len, p_len, n_len), dtype=np.float64)
    gbu_arr = np.empty((t_len, p_len, n_len), dtype=np.float64)
    gc_arr = np.zeros((t_len, n_len), dtype=np.float64)
    gh_arr = np.zeros((p_len, n_len), dtype=np.float64)
    cdef double[:, :, ::1] gabar = gabar_arr
    cdef double[:, :, ::1] gbu = gbu_arr
    cdef double[:, ::1] gc = gc_arr
    cdef double[:, ::1] gh = gh_arr
    cdef Py_ssize_t t, p, n
    cdef double g
    for t in range(t_len - 1, -1, -1):
        for p in range(p_len):
            for n in range(n_len):
                g = gy[t, p] * c[t, n] + gh[p, n]
                gbu[t, p, n] = g
                gabar[t, p, n] = g * h[t - 1, p, n] if t > 0 else 0.0
                gc[t, n] += gy[t, p] * h[t, p, n]
                gh[p, n] = abar[t, p, n] * g
    return gabar_arr, gbu_arr, gc_arr

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core: fused LSTM gate step and restricted
Damerau-Levenshtein distance. Mirrors ``_pykernels`` exactly."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def cell_forward(floating[:, ::1] pre, floating[:, ::1] c_prev):
    cdef Py_ssize_t n = pre.shape[0]
    cdef Py_ssize_t h = pre.shape[1] // 4
    dtype = np.float32 if floating is float else np.float64
    act_arr = np.empty((n, 4 * h), dtype=dtype)
    hc_arr = np.empty((n, 2 * h), dtype=dtype)
    cdef floating[:, ::1] act = act_arr
    cdef floating[:, ::1] hc = hc_arr
    cdef Py_ssize_t r, k
    cdef floating i, f, g, o, c
    for r in range(n):
        for k in range(h):
            i = <floating>(1.0 / (1.0 + exp(-pre[r, k])))
            f = <floating>(1.0 / (1.0 + exp(-pre[r, h + k])))
            g = <floating>tanh(pre[r, 2 * h + k])
            o = <floating>(1.0 / (1.0 + exp(-pre[r, 3 * h + k])))
            act[r, k] = i
            act[r, h + k] = f
            act[r, 2 * h + k] = g
            act[r, 3 * h + k] = o
            c = f * c_prev[r, k] + i * g
            hc[r, h + k] = c
            hc[r, k] = <floating>(o * tanh(c))
    return hc_arr, act_arr


def cell_backward(floating[:, ::1] ghc, floating[:, ::1] act,
                  floating[:, ::1] c_prev, floating[:, ::1] c_new):
    cdef Py_ssize_t n = act.shape[0]
    cdef Py_ssize_t h = act.shape[1] // 4
    dtype = np.float32 if floating is float else np.float64
    gpre_arr = np.empty((n, 4 * h), dtype=dtype)
    gcp_arr = np.empty((n, h), dtype=dtype)
    cdef floating[:, ::1] gpre = gpre_arr
    cdef floating[:, ::1] gcp = gcp_arr
    cdef Py_ssize_t r, k
    cdef floating i, f, g, o, tc, gh, gc
    for r in range(n):
        for k in range(h):
            i = act[r, k]
            f = act[r, h + k]
            g = act[r, 2 * h + k]
            o = act[r, 3 * h + k]
            gh = ghc[r, k]
            tc = <floating>tanh(c_new[r, k])
            gc = ghc[r, h + k] + gh * o * (<floating>1.0 - tc * tc)
            gpre[r, k] = gc * g * i * (<floating>1.0 - i)
            gpre[r, h + k] = gc * c_prev[r, k] * f * (<floating>1.0 - f)
            gpre[r, 2 * h + k] = gc * i * (<floating>1.0 - g * g)
            gpre[r, 3 * h + k] = gh * tc * o * (<floating>1.0 - o)
            gcp[r, k] = gc * f
    return gpre_arr, gcp_arr


def osa_distance(a, b):
    cdef cnp.int32_t[::1] av = np.ascontiguousarray(a, dtype=np.int32)
    cdef cnp.int32_t[::1] bv = np.ascontiguousarray(b, dtype=np.int32)
    return _osa(av, bv)


@cython.boundscheck(False)
cdef long _osa(cnp.int32_t[::1] a, cnp.int32_t[::1] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t n = b.shape[0]
    if m == 0:
        return n
    if n == 0:
        return m
    buf_arr = np.empty((3, n + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] buf = buf_arr
    cdef cnp.int64_t * prev2 = &buf[0, 0]
    cdef cnp.int64_t * prev = &buf[1, 0]
    cdef cnp.int64_t * cur = &buf[2, 0]
    cdef cnp.int64_t * tmp
    cdef Py_ssize_t ii, jj
    cdef long cost, d
    for jj in range(n + 1):
        prev[jj] = jj
        prev2[jj] = 0
    for ii in range(1, m + 1):
        cur[0] = ii
        for jj in range(1, n + 1):
            cost = 0 if a[ii - 1] == b[jj - 1] else 1
            d = prev[jj] + 1
            if cur[jj - 1] + 1 < d:
                d = cur[jj - 1] + 1
            if prev[jj - 1] + cost < d:
                d = prev[jj - 1] + cost
            if ii > 1 and jj > 1 and a[ii - 1] == b[jj - 2] and a[ii - 2] == b[jj - 1]:
                if prev2[jj - 2] + 1 < d:
                    d = prev2[jj - 2] + 1
            cur[jj] = d
        tmp = prev2
        prev2 = prev
        prev = cur
        cur = tmp
    return prev[n]


def osa_distance_block(a, block, lengths):
    cdef cnp.int32_t[::1] av = np.ascontiguousarray(a, dtype=np.int32)
    cdef cnp.int32_t[:, ::1] bl = np.ascontiguousarray(block, dtype=np.int32)
    cdef cnp.int64_t[::1] ln = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t t = bl.shape[0]
    out_arr = np.empty(t, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t r
    for r in range(t):
        out[r] = _osa(av, bl[r, : ln[r]])
    return out_arr

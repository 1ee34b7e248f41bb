# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: 1-d convolution and masked row softmax.

Same contracts as the NumPy fallback in ``_py``; see that module for the
shape conventions. Loops accumulate in a fixed order per output element, so
results are independent of the sequence length (bit-stable under the
incremental decoder's tail recomputation).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def conv1d_fwd(double[:, :, ::1] x, double[:, :, ::1] w, double[::1] b):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], s = w.shape[2]
    cdef Py_ssize_t pad = (s - 1) // 2
    cdef Py_ssize_t bi, o, i, l, k, pos
    cdef double acc
    y_arr = np.empty((B, Cout, L), dtype=np.float64)
    cdef double[:, :, ::1] y = y_arr
    for bi in range(B):
        for o in range(Cout):
            for l in range(L):
                acc = b[o]
                for i in range(Cin):
                    for k in range(s):
                        pos = l + k - pad
                        if 0 <= pos < L:
                            acc += x[bi, i, pos] * w[o, i, k]
                y[bi, o, l] = acc
    return y_arr


def conv1d_bwd(double[:, :, ::1] x, double[:, :, ::1] w, double[:, :, ::1] gy):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], s = w.shape[2]
    cdef Py_ssize_t pad = (s - 1) // 2
    cdef Py_ssize_t bi, o, i, l, k, pos
    cdef double g, acc
    gx_arr = np.zeros((B, Cin, L), dtype=np.float64)
    gw_arr = np.zeros((Cout, Cin, s), dtype=np.float64)
    gb_arr = np.zeros(Cout, dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    for bi in range(B):
        for o in range(Cout):
            for l in range(L):
                g = gy[bi, o, l]
                gb[o] += g
                for i in range(Cin):
                    for k in range(s):
                        pos = l + k - pad
                        if 0 <= pos < L:
                            gw[o, i, k] += g * x[bi, i, pos]
                            gx[bi, i, pos] += g * w[o, i, k]
    return gx_arr, gw_arr, gb_arr


def masked_softmax_fwd(scores, excluded):
    cdef Py_ssize_t cols = scores.shape[scores.ndim - 1]
    s2 = np.ascontiguousarray(scores.reshape(-1, cols))
    out = np.empty_like(s2)
    if excluded is None:
        _softmax_rows(s2, out)
    else:
        # the mask may cover only trailing dims; rows repeat cyclically
        e2 = np.ascontiguousarray(excluded.reshape(-1, cols), dtype=np.uint8)
        _softmax_rows_masked(s2, e2, out)
    return out.reshape(scores.shape)


def masked_softmax_bwd(probs, gprobs):
    cdef Py_ssize_t cols = probs.shape[probs.ndim - 1]
    p2 = np.ascontiguousarray(probs.reshape(-1, cols))
    g2 = np.ascontiguousarray(gprobs.reshape(-1, cols))
    out = np.empty_like(p2)
    _softmax_rows_bwd(p2, g2, out)
    return out.reshape(probs.shape)


def _softmax_rows(double[:, ::1] s, double[:, ::1] out):
    cdef Py_ssize_t R = s.shape[0], C = s.shape[1]
    cdef Py_ssize_t r, c
    cdef double m, tot, v
    for r in range(R):
        m = -INFINITY
        for c in range(C):
            if s[r, c] > m:
                m = s[r, c]
        tot = 0.0
        for c in range(C):
            v = exp(s[r, c] - m)
            out[r, c] = v
            tot += v
        for c in range(C):
            out[r, c] /= tot


def _softmax_rows_masked(double[:, ::1] s, unsigned char[:, ::1] excl, double[:, ::1] out):
    cdef Py_ssize_t R = s.shape[0], C = s.shape[1], M = excl.shape[0]
    cdef Py_ssize_t r, c, mr
    cdef double m, tot, v
    for r in range(R):
        mr = r % M
        m = -INFINITY
        for c in range(C):
            if excl[mr, c]:
                continue
            if s[r, c] > m:
                m = s[r, c]
        tot = 0.0
        for c in range(C):
            if excl[mr, c]:
                out[r, c] = 0.0
            else:
                v = exp(s[r, c] - m)
                out[r, c] = v
                tot += v
        for c in range(C):
            out[r, c] /= tot


def _softmax_rows_bwd(double[:, ::1] p, double[:, ::1] g, double[:, ::1] out):
    cdef Py_ssize_t R = p.shape[0], C = p.shape[1]
    cdef Py_ssize_t r, c
    cdef double inner
    for r in range(R):
        inner = 0.0
        for c in range(C):
            inner += g[r, c] * p[r, c]
        for c in range(C):
            out[r, c] = p[r, c] * (g[r, c] - inner)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY, isfinite

cnp.import_array()


cdef inline void _valid_range(Py_ssize_t n_out, Py_ssize_t n_in, Py_ssize_t offset, Py_ssize_t stride,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output indices o with 0 <= o * stride + offset < n_in
    cdef Py_ssize_t a = 0, b = n_out
    if offset < 0:
        a = (-offset + stride - 1) // stride
    if (n_out - 1) * stride + offset >= n_in:
        b = (n_in - 1 - offset) // stride + 1 if n_in - 1 - offset >= 0 else 0
    if b < a:
        b = a
    lo[0] = a
    hi[0] = b


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.empty((B, C * kh * kw, oh * ow))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, base, y0, y1, x0, x1
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    _valid_range(oh, H, i - pad, stride, &y0, &y1)
                    for j in range(kw):
                        _valid_range(ow, W, j - pad, stride, &x0, &x1)
                        row = (c * kh + i) * kw + j
                        for oy in range(oh):
                            base = oy * ow
                            if oy < y0 or oy >= y1:
                                for ox in range(ow):
                                    out[b, row, base + ox] = 0.0
                                continue
                            iy = oy * stride + i - pad
                            for ox in range(x0):
                                out[b, row, base + ox] = 0.0
                            for ox in range(x0, x1):
                                out[b, row, base + ox] = x[b, c, iy, ox * stride + j - pad]
                            for ox in range(x1, ow):
                                out[b, row, base + ox] = 0.0
    return out_arr


def col2im(const double[:, :, ::1] cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, row, iy, base, y0, y1, x0, x1
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    _valid_range(oh, H, i - pad, stride, &y0, &y1)
                    for j in range(kw):
                        _valid_range(ow, W, j - pad, stride, &x0, &x1)
                        row = (c * kh + i) * kw + j
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            base = oy * ow
                            for ox in range(x0, x1):
                                out[b, c, iy, ox * stride + j - pad] += cols[b, row, base + ox]
    return out_arr


cdef inline double _neg_eps_lse_row(const double[:, ::1] C, const double[::1] g,
                                    Py_ssize_t i, double eps) nogil:
    # -eps * log sum_j exp((g_j - C_ij) / eps)
    cdef Py_ssize_t j, nb = C.shape[1]
    cdef double m = -INFINITY, z, s = 0.0
    for j in range(nb):
        z = (g[j] - C[i, j]) / eps
        if z > m:
            m = z
    if not isfinite(m):
        return INFINITY
    for j in range(nb):
        s += exp((g[j] - C[i, j]) / eps - m)
    return -eps * (log(s) + m)


cdef inline double _neg_eps_lse_col(const double[:, ::1] C, const double[::1] f,
                                    Py_ssize_t j, double eps) nogil:
    cdef Py_ssize_t i, na = C.shape[0]
    cdef double m = -INFINITY, z, s = 0.0
    for i in range(na):
        z = (f[i] - C[i, j]) / eps
        if z > m:
            m = z
    if not isfinite(m):
        return INFINITY
    for i in range(na):
        s += exp((f[i] - C[i, j]) / eps - m)
    return -eps * (log(s) + m)


def sinkhorn_log(const double[:, :, ::1] cost, const double[:, ::1] log_a,
                 const double[:, ::1] log_b, double eps, int max_iter, double tol,
                 f0=None, g0=None):
    cdef Py_ssize_t N = cost.shape[0], A = cost.shape[1], B = cost.shape[2]
    f_arr = np.zeros((N, A)) if f0 is None else np.array(f0, dtype=np.float64, order="C")
    g_arr = np.zeros((N, B)) if g0 is None else np.array(g0, dtype=np.float64, order="C")
    bf_arr = f_arr.copy()
    bg_arr = g_arr.copy()
    it_arr = np.zeros(N, dtype=np.int64)
    err_arr = np.full(N, np.inf)
    cdef double[:, ::1] f = f_arr
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] bf = bf_arr
    cdef double[:, ::1] bg = bg_arr
    cdef long long[::1] iters = it_arr
    cdef double[::1] best = err_arr
    cdef Py_ssize_t n, i, j
    cdef int it
    cdef double err, row, la
    with nogil:
        for n in range(N):
            for it in range(max_iter):
                for i in range(A):
                    f[n, i] = eps * log_a[n, i] + _neg_eps_lse_row(cost[n], g[n], i, eps)
                for j in range(B):
                    g[n, j] = eps * log_b[n, j] + _neg_eps_lse_col(cost[n], f[n], j, eps)
                err = 0.0
                for i in range(A):
                    row = 0.0
                    for j in range(B):
                        row += exp((f[n, i] + g[n, j] - cost[n, i, j]) / eps)
                    la = log_a[n, i]
                    if isfinite(la):
                        err += fabs(row - exp(la))
                    else:
                        err += fabs(row)
                iters[n] = it + 1
                if err < best[n]:
                    best[n] = err
                    for i in range(A):
                        bf[n, i] = f[n, i]
                    for j in range(B):
                        bg[n, j] = g[n, j]
                if err <= tol:
                    break
    return bf_arr, bg_arr, it_arr, err_arr

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: LSTM recurrence (forward/backward) and edit distance.

Signatures mirror ``_kernels_py``; inputs must be C-contiguous.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, tanh, tanhf
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()


cdef inline floating _tanh(floating z) noexcept nogil:
    if floating is float:
        return tanhf(z)
    return tanh(z)


cdef inline floating _sig(floating z) noexcept nogil:
    # split by sign so exp never overflows
    cdef floating e
    if floating is float:
        e = expf(-z if z >= 0 else z)
    else:
        e = exp(-z if z >= 0 else z)
    return 1 / (1 + e) if z >= 0 else e / (1 + e)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, floating alpha,
                       floating* a, int lda, floating* b, int ldb, floating beta,
                       floating* c, int ldc) noexcept nogil:
    # column-major BLAS; callers pass row-major buffers with swapped roles
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def lstm_forward(floating[:, :, ::1] xproj, floating[:, ::1] wh, bint reverse):
    cdef Py_ssize_t n = xproj.shape[0], t_len = xproj.shape[1], four_h = xproj.shape[2]
    cdef Py_ssize_t hid = four_h // 4
    dtype = np.float32 if floating is float else np.float64
    h_np = np.zeros((n, t_len, hid), dtype)
    c_np = np.zeros((n, t_len, hid), dtype)
    g_np = np.array(xproj, dtype=dtype, copy=True)
    cdef floating[:, :, ::1] h_all = h_np
    cdef floating[:, :, ::1] c_all = c_np
    cdef floating[:, :, ::1] gates = g_np
    cdef Py_ssize_t b, s, t, prev, j
    cdef floating cv, cprev, ig, fg, gg, og
    if n == 0 or t_len == 0 or hid == 0:
        return h_np, c_np, g_np
    with nogil:
        for s in range(t_len):
            t = t_len - 1 - s if reverse else s
            prev = t + 1 if reverse else t - 1
            if s > 0:
                # gates[:, t] += h_all[:, prev] @ wh
                _gemm(c'N', c'N', <int>four_h, <int>n, <int>hid, 1.0,
                      &wh[0, 0], <int>four_h, &h_all[0, prev, 0], <int>(t_len * hid),
                      1.0, &gates[0, t, 0], <int>(t_len * four_h))
            for b in range(n):
                for j in range(hid):
                    ig = _sig(gates[b, t, j])
                    fg = _sig(gates[b, t, hid + j])
                    gg = _tanh(gates[b, t, 2 * hid + j])
                    og = _sig(gates[b, t, 3 * hid + j])
                    cprev = c_all[b, prev, j] if s > 0 else 0.0
                    cv = fg * cprev + ig * gg
                    c_all[b, t, j] = cv
                    h_all[b, t, j] = og * _tanh(cv)
                    gates[b, t, j] = ig
                    gates[b, t, hid + j] = fg
                    gates[b, t, 2 * hid + j] = gg
                    gates[b, t, 3 * hid + j] = og
    return h_np, c_np, g_np


def lstm_backward(floating[:, :, ::1] dh_all, floating[:, :, ::1] h_all,
                  floating[:, :, ::1] c_all, floating[:, :, ::1] gates,
                  floating[:, ::1] wh, bint reverse):
    cdef Py_ssize_t n = dh_all.shape[0], t_len = dh_all.shape[1], hid = dh_all.shape[2]
    cdef Py_ssize_t four_h = 4 * hid
    dtype = np.float32 if floating is float else np.float64
    dx_np = np.zeros((n, t_len, four_h), dtype)
    dwh_np = np.zeros((hid, four_h), dtype)
    dhn_np = np.zeros((n, hid), dtype)
    dcn_np = np.zeros((n, hid), dtype)
    cdef floating[:, :, ::1] dx = dx_np
    cdef floating[:, ::1] dwh = dwh_np
    cdef floating[:, ::1] dh_next = dhn_np
    cdef floating[:, ::1] dc_next = dcn_np
    cdef Py_ssize_t b, s, t, prev, j
    cdef bint first
    cdef floating ig, fg, gg, og, tc, dh, dc, cprev
    if n == 0 or t_len == 0 or hid == 0:
        return dx_np, dwh_np
    with nogil:
        for s in range(t_len):
            # walk the recurrence backwards
            t = s if reverse else t_len - 1 - s
            prev = t + 1 if reverse else t - 1
            first = prev < 0 or prev >= t_len
            for b in range(n):
                for j in range(hid):
                    ig = gates[b, t, j]
                    fg = gates[b, t, hid + j]
                    gg = gates[b, t, 2 * hid + j]
                    og = gates[b, t, 3 * hid + j]
                    cprev = 0.0 if first else c_all[b, prev, j]
                    dh = dh_all[b, t, j] + dh_next[b, j]
                    tc = _tanh(c_all[b, t, j])
                    dc = dc_next[b, j] + dh * og * (1 - tc * tc)
                    dx[b, t, j] = dc * gg * ig * (1 - ig)
                    dx[b, t, hid + j] = dc * cprev * fg * (1 - fg)
                    dx[b, t, 2 * hid + j] = dc * ig * (1 - gg * gg)
                    dx[b, t, 3 * hid + j] = dh * tc * og * (1 - og)
                    dc_next[b, j] = dc * fg
            if not first:
                # dwh += h_all[:, prev].T @ dx[:, t]
                _gemm(c'N', c'T', <int>four_h, <int>hid, <int>n, 1.0,
                      &dx[0, t, 0], <int>(t_len * four_h), &h_all[0, prev, 0], <int>(t_len * hid),
                      1.0, &dwh[0, 0], <int>four_h)
            # dh_next = dx[:, t] @ wh.T
            _gemm(c'T', c'N', <int>hid, <int>n, <int>four_h, 1.0,
                  &wh[0, 0], <int>four_h, &dx[0, t, 0], <int>(t_len * four_h),
                  0.0, &dh_next[0, 0], <int>hid)
    return dx_np, dwh_np


def levenshtein(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n == 0:
        return m
    if m == 0:
        return n
    prev_np = np.arange(m + 1, dtype=np.int64)
    cur_np = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_np
    cdef long long[::1] cur = cur_np
    cdef long long[::1] tmp
    cdef long long best, cand
    with nogil:
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                best = prev[j] + 1
                cand = cur[j - 1] + 1
                if cand < best:
                    best = cand
                cand = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
                if cand < best:
                    best = cand
                cur[j] = best
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[m])


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int sh, int sw, int dh, int dw, int ho, int wo):
    """Patch matrix (N*ho*wo, C*kh*kw) of an already padded NCHW input."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ck = c * kh * kw
    dtype = np.float32 if floating is float else np.float64
    cols_np = np.empty((n * ho * wo, ck), dtype)
    cdef floating[:, ::1] cols = cols_np
    cdef Py_ssize_t b, y, x, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = xp[b, ch, y * sh + i * dh, x * sw + j * dw]
                                col += 1
    return cols_np


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           int kh, int kw, int sh, int sw, int dh, int dw, int ho, int wo):
    """Adjoint of :func:`im2col`: scatter-add patch gradients into (N, C, hp, wp)."""
    dtype = np.float32 if floating is float else np.float64
    out_np = np.zeros((n, c, hp, wp), dtype)
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, y, x, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    row = (b * ho + y) * wo + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ch, y * sh + i * dh, x * sw + j * dw] += cols[row, col]
                                col += 1
    return out_np

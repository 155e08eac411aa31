# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (direct loops over typed memoryviews).

Padding is handled by precomputed loop bounds so the innermost loops stay
branch-free and vectorizable.
"""

import numpy as np

cimport cython


ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest n >= 0 with n*stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t size,
                           Py_ssize_t n_out) nogil:
    # smallest bound <= n_out with n*stride + offset < size for all n below it
    cdef Py_ssize_t h = (size - offset + stride - 1) // stride
    if h < 0:
        return 0
    if h > n_out:
        return n_out
    return h


def conv2d_fwd(real[:, :, ::1] x, real[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    if real is float:
        out_np = np.zeros((cout, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((cout, ho, wo), dtype=np.float64)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t o, i, a, b, m, n, ii, jj0, m_lo, m_hi, n_lo, n_hi
    cdef real wv
    with nogil:
        for o in range(cout):
            for i in range(cin):
                for a in range(kh):
                    m_lo = _lo(a - padding, stride)
                    m_hi = _hi(a - padding, stride, h, ho)
                    for b in range(kw):
                        wv = w[o, i, a, b]
                        n_lo = _lo(b - padding, stride)
                        n_hi = _hi(b - padding, stride, wd, wo)
                        for m in range(m_lo, m_hi):
                            ii = m * stride + a - padding
                            jj0 = n_lo * stride + b - padding
                            for n in range(n_lo, n_hi):
                                out[o, m, n] += wv * x[i, ii, jj0]
                                jj0 += stride
    return out_np


def conv2d_bwd(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] gy,
               int stride, int padding):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    if real is float:
        gx_np = np.zeros((cin, h, wd), dtype=np.float32)
        gw_np = np.zeros((cout, cin, kh, kw), dtype=np.float32)
    else:
        gx_np = np.zeros((cin, h, wd), dtype=np.float64)
        gw_np = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    cdef real[:, :, ::1] gx = gx_np
    cdef real[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t o, i, a, b, m, n, ii, jj0, m_lo, m_hi, n_lo, n_hi
    cdef real wv, g, accw
    with nogil:
        for o in range(cout):
            for i in range(cin):
                for a in range(kh):
                    m_lo = _lo(a - padding, stride)
                    m_hi = _hi(a - padding, stride, h, ho)
                    for b in range(kw):
                        wv = w[o, i, a, b]
                        n_lo = _lo(b - padding, stride)
                        n_hi = _hi(b - padding, stride, wd, wo)
                        accw = 0
                        for m in range(m_lo, m_hi):
                            ii = m * stride + a - padding
                            jj0 = n_lo * stride + b - padding
                            for n in range(n_lo, n_hi):
                                g = gy[o, m, n]
                                accw += g * x[i, ii, jj0]
                                gx[i, ii, jj0] += g * wv
                                jj0 += stride
                        gw[o, i, a, b] += accw
    return gx_np, gw_np


def conv3d_fwd(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t cin = x.shape[0], d = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = (d + 2 * padding - kd) // stride + 1
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    if real is float:
        out_np = np.zeros((cout, do, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((cout, do, ho, wo), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t o, i, a, b, c, l, m, n, zz, ii, jj0
    cdef Py_ssize_t l_lo, l_hi, m_lo, m_hi, n_lo, n_hi
    cdef real wv
    with nogil:
        for o in range(cout):
            for i in range(cin):
                for a in range(kd):
                    l_lo = _lo(a - padding, stride)
                    l_hi = _hi(a - padding, stride, d, do)
                    for b in range(kh):
                        m_lo = _lo(b - padding, stride)
                        m_hi = _hi(b - padding, stride, h, ho)
                        for c in range(kw):
                            wv = w[o, i, a, b, c]
                            n_lo = _lo(c - padding, stride)
                            n_hi = _hi(c - padding, stride, wd, wo)
                            for l in range(l_lo, l_hi):
                                zz = l * stride + a - padding
                                for m in range(m_lo, m_hi):
                                    ii = m * stride + b - padding
                                    jj0 = n_lo * stride + c - padding
                                    for n in range(n_lo, n_hi):
                                        out[o, l, m, n] += wv * x[i, zz, ii, jj0]
                                        jj0 += stride
    return out_np


def conv3d_bwd(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, real[:, :, :, ::1] gy,
               int stride, int padding):
    cdef Py_ssize_t cin = x.shape[0], d = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    if real is float:
        gx_np = np.zeros((cin, d, h, wd), dtype=np.float32)
        gw_np = np.zeros((cout, cin, kd, kh, kw), dtype=np.float32)
    else:
        gx_np = np.zeros((cin, d, h, wd), dtype=np.float64)
        gw_np = np.zeros((cout, cin, kd, kh, kw), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef real[:, :, :, :, ::1] gw = gw_np
    cdef Py_ssize_t o, i, a, b, c, l, m, n, zz, ii, jj0
    cdef Py_ssize_t l_lo, l_hi, m_lo, m_hi, n_lo, n_hi
    cdef real wv, g, accw
    with nogil:
        for o in range(cout):
            for i in range(cin):
                for a in range(kd):
                    l_lo = _lo(a - padding, stride)
                    l_hi = _hi(a - padding, stride, d, do)
                    for b in range(kh):
                        m_lo = _lo(b - padding, stride)
                        m_hi = _hi(b - padding, stride, h, ho)
                        for c in range(kw):
                            wv = w[o, i, a, b, c]
                            n_lo = _lo(c - padding, stride)
                            n_hi = _hi(c - padding, stride, wd, wo)
                            accw = 0
                            for l in range(l_lo, l_hi):
                                zz = l * stride + a - padding
                                for m in range(m_lo, m_hi):
                                    ii = m * stride + b - padding
                                    jj0 = n_lo * stride + c - padding
                                    for n in range(n_lo, n_hi):
                                        g = gy[o, l, m, n]
                                        accw += g * x[i, zz, ii, jj0]
                                        gx[i, zz, ii, jj0] += g * wv
                                        jj0 += stride
                            gw[o, i, a, b, c] += accw
    return gx_np, gw_np

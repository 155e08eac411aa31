"""Pure-numpy convolution kernels (im2col views + BLAS tensordot)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad2(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _pad3(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def conv2d_fwd(x, w, stride=1, padding=0):
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(np.tensordot(w, win, axes=((1, 2, 3), (0, 3, 4))))


def conv2d_bwd(x, w, gy, stride=1, padding=0):
    cin, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gy.shape[1], gy.shape[2]
    xp = _pad2(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    gw = np.tensordot(gy, win, axes=((1, 2), (1, 2)))
    gxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            contrib = np.tensordot(w[:, :, a, b], gy, axes=((0,), (0,)))
            gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += contrib
    gx = np.ascontiguousarray(gxp[:, padding:padding + h, padding:padding + wd])
    return gx, np.ascontiguousarray(gw)


def conv3d_fwd(x, w, stride=1, padding=0):
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    xp = _pad3(x, padding)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    return np.ascontiguousarray(np.tensordot(w, win, axes=((1, 2, 3, 4), (0, 4, 5, 6))))


def conv3d_bwd(x, w, gy, stride=1, padding=0):
    cin, d, h, wd = x.shape
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    xp = _pad3(x, padding)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    gw = np.tensordot(gy, win, axes=((1, 2, 3), (1, 2, 3)))
    gxp = np.zeros_like(xp)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                contrib = np.tensordot(w[:, :, a, b, c], gy, axes=((0,), (0,)))
                gxp[:, a:a + stride * do:stride,
                    b:b + stride * ho:stride,
                    c:c + stride * wo:stride] += contrib
    gx = np.ascontiguousarray(gxp[:, padding:padding + d, padding:padding + h,
                                  padding:padding + wd])
    return gx, np.ascontiguousarray(gw)

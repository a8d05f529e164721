# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and batch-norm kernels.

Same contracts as ``_fallback``; every loop runs in fixed row-major order
so results do not depend on scheduling.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (n + 2 * p - k) // s + 1


cdef inline void _valid_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t W,
                              Py_ssize_t Wo, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output columns ow with 0 <= ow*stride + j - pad < W
    cdef Py_ssize_t a = pad - j
    cdef Py_ssize_t l = 0
    cdef Py_ssize_t h
    if a > 0:
        l = (a + stride - 1) // stride
    h = (W - 1 + pad - j)
    if h < 0:
        h = 0
    else:
        h = h // stride + 1
    if h > Wo:
        h = Wo
    if l > h:
        l = h
    lo[0] = l
    hi[0] = h


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad), Wo = _out(W, kw, stride, pad)
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, ih, lo, hi, off
    cdef real* dst
    cdef const real* src
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _valid_range(j, stride, pad, W, Wo, &lo, &hi)
                    off = j - pad
                    col = 0
                    for n in range(N):
                        for oh in range(Ho):
                            dst = &cols[row, col]
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                for ow in range(Wo):
                                    dst[ow] = 0
                            else:
                                src = &x[n, c, ih, 0]
                                for ow in range(lo):
                                    dst[ow] = 0
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        dst[ow] = src[ow + off]
                                else:
                                    for ow in range(lo, hi):
                                        dst[ow] = src[ow * stride + off]
                                for ow in range(hi, Wo):
                                    dst[ow] = 0
                            col += Wo


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad), Wo = _out(W, kw, stride, pad)
    cdef Py_ssize_t c, i, j, n, oh, ow, row, col, ih, lo, hi, off
    cdef const real* src
    cdef real* dst
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    _valid_range(j, stride, pad, W, Wo, &lo, &hi)
                    off = j - pad
                    col = 0
                    for n in range(N):
                        for oh in range(Ho):
                            ih = oh * stride + i - pad
                            if ih >= 0 and ih < H:
                                src = &cols[row, col]
                                dst = &out[n, c, ih, 0]
                                if stride == 1:
                                    for ow in range(lo, hi):
                                        dst[ow + off] += src[ow]
                                else:
                                    for ow in range(lo, hi):
                                        dst[ow * stride + off] += src[ow]
                            col += Wo


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    N, C, H, W = x.shape
    Ho = _out(H, kh, stride, pad)
    Wo = _out(W, kw, stride, pad)
    cols = np.empty((C * kh * kw, N * Ho * Wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad)
    return cols


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad)
    return out


def _bn_fwd(real[:, :, :, ::1] x, real[::1] gamma, real[::1] beta, double eps,
            real[:, :, :, ::1] y, real[:, :, :, ::1] xhat,
            double[::1] mean, double[::1] var, double[::1] inv_std):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, h, w
    cdef double m = N * H * W, s, d, xh, g, b
    with nogil:
        for c in range(C):
            s = 0
            for n in range(N):
                for h in range(H):
                    for w in range(W):
                        s = s + x[n, c, h, w]
            mean[c] = s / m
            s = 0
            for n in range(N):
                for h in range(H):
                    for w in range(W):
                        d = x[n, c, h, w] - mean[c]
                        s = s + d * d
            var[c] = s / m
            inv_std[c] = 1.0 / sqrt(var[c] + eps)
            g = gamma[c]
            b = beta[c]
            for n in range(N):
                for h in range(H):
                    for w in range(W):
                        xh = (x[n, c, h, w] - mean[c]) * inv_std[c]
                        xhat[n, c, h, w] = <real>xh
                        y[n, c, h, w] = <real>(xh * g + b)


def _bn_bwd(real[:, :, :, ::1] g, real[:, :, :, ::1] xhat, real[::1] gamma,
            double[::1] inv_std, real[:, :, :, ::1] dx,
            double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t n, c, h, w
    cdef double m = N * H * W, sb, sg, scale
    with nogil:
        for c in range(C):
            sb = 0
            sg = 0
            for n in range(N):
                for h in range(H):
                    for w in range(W):
                        sb = sb + g[n, c, h, w]
                        sg = sg + g[n, c, h, w] * xhat[n, c, h, w]
            dbeta[c] = sb
            dgamma[c] = sg
            scale = gamma[c] * inv_std[c] / m
            for n in range(N):
                for h in range(H):
                    for w in range(W):
                        dx[n, c, h, w] = <real>(scale * (m * g[n, c, h, w] - sb - xhat[n, c, h, w] * sg))


def bn_train_forward(x, gamma, beta, double eps):
    x = np.ascontiguousarray(x)
    C = x.shape[1]
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(C)
    var = np.empty(C)
    inv_std = np.empty(C)
    _bn_fwd(x, np.ascontiguousarray(gamma, dtype=x.dtype), np.ascontiguousarray(beta, dtype=x.dtype),
            eps, y, xhat, mean, var, inv_std)
    return y, xhat, mean.astype(x.dtype), var.astype(x.dtype), inv_std.astype(x.dtype)


def bn_train_backward(g, xhat, gamma, inv_std):
    g = np.ascontiguousarray(g)
    C = g.shape[1]
    dx = np.empty_like(g)
    dgamma = np.empty(C)
    dbeta = np.empty(C)
    _bn_bwd(g, np.ascontiguousarray(xhat, dtype=g.dtype), np.ascontiguousarray(gamma, dtype=g.dtype),
            np.ascontiguousarray(inv_std, dtype=np.float64), dx, dgamma, dbeta)
    return dx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)

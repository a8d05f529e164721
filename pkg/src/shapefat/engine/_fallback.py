"""Pure numpy versions of the hot convolution kernels.

Column layout shared with the compiled core: ``cols[(c, i, j), (n, oh, ow)]``.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = out_size(h, kh, stride, pad)
    wo = out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    ho = out_size(h, kh, stride, pad)
    wo = out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def bn_train_forward(x, gamma, beta, eps):
    axes = (0, 2, 3)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, mean, var, inv_std


def bn_train_backward(g, xhat, gamma, inv_std):
    axes = (0, 2, 3)
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    scale = (gamma * inv_std / m)[None, :, None, None]
    dx = scale * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx, dgamma, dbeta

"""Differentiable operators.

Each op computes its forward value with numpy and records a closure that
maps the upstream gradient to one gradient per parent (``None`` for a
parent that needs none).
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _need(t):
    return t is not None and t.requires_grad


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-d cross-correlation with zero padding, NCHW layout."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected 4-d input and weight")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    if bias is not None and bias.shape != (k,):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one entry per output channel")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(k, -1)
    # one same-shaped GEMM per sample keeps results independent of batch size
    out = np.matmul(w2, cols.reshape(-1, n, ho * wo).transpose(1, 0, 2)).reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
        dx = dw = db = None
        if _need(weight):
            dw = (g2 @ cols.T).reshape(weight.shape)
        if _need(bias):
            db = g.sum(axis=(0, 2, 3))
        if _need(x):
            dcols = w2.T @ g2
            if pointwise:
                dx = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dx = kernels.col2im(dcols, x.shape, kh, kw, stride, pad)
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


@dataclass
class BatchNormState:
    """Per-channel running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: bool = False
    momentum: float = BN_MOMENTUM

    @classmethod
    def zeros(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def mark_initialized(self):
        self.initialized = True


def batchnorm2d(x, gamma, beta, state, train=True, eps=BN_EPS):
    """Batch normalization over (N, H, W) per channel.

    Train mode normalizes with batch statistics and updates ``state``
    (unbiased variance for the running estimate). Eval mode uses the
    running statistics and refuses to run before they exist.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d", x.shape, detail="expected NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d", x.shape, gamma.shape, beta.shape)

    if not train:
        if not state.initialized:
            raise RuntimeError("batchnorm2d: eval mode before running statistics were initialized")
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        scale = (gamma.data * inv_std)[None, :, None, None]
        mean = state.running_mean.astype(x.dtype)[None, :, None, None]
        xhat = (x.data - mean) * inv_std[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def backward_eval(g):
            dx = g * scale if _need(x) else None
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if _need(gamma) else None
            dbeta = g.sum(axis=(0, 2, 3)) if _need(beta) else None
            return dx, dgamma, dbeta

        return make_result(out, (x, gamma, beta), backward_eval)

    out, xhat, mean, var, inv_std = kernels.bn_train_forward(x.data, gamma.data, beta.data, eps)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    unbiased = var * (m / (m - 1)) if m > 1 else var
    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * unbiased
    state.initialized = True

    def backward(g):
        dx, dgamma, dbeta = kernels.bn_train_backward(g, xhat, gamma.data, inv_std)
        return (dx if _need(x) else None), dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def relu(x):
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, factor):
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def sum_all(x):
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def global_avg_pool(x):
    """Per-channel spatial mean: N×C×H×W -> N×C."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="expected NCHW input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return make_result(out, (x,), backward)


def fully_connected(x, weight, bias):
    """Affine map ``x @ weight + bias`` for N×D input and D×M weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("fully_connected", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("fully_connected", weight.shape, bias.shape, detail="bias length must equal output width")
    out = np.matmul(x.data[:, None, :], weight.data)[:, 0, :] + bias.data

    def backward(g):
        dx = g @ weight.data.T if _need(x) else None
        dw = x.data.T @ g if _need(weight) else None
        db = g.sum(axis=0) if _need(bias) else None
        return dx, dw, db

    return make_result(out, (x, weight, bias), backward)


def concat_channels(*tensors):
    """Stack along axis 1. All other dimensions must agree."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError("concat_channels", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tensors, backward)


def take_channel(x, k):
    """Channel ``k`` of an N×C×... tensor, keeping a singleton channel axis."""
    out = x.data[:, k:k + 1].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, k:k + 1] = g
        return (dx,)

    return make_result(out, (x,), backward)


def mul_broadcast(features, amap):
    """Multiply every channel of N×C×H×W features by an N×1×H×W map."""
    if (features.data.ndim != 4 or amap.data.ndim != 4 or amap.shape[1] != 1
            or features.shape[0] != amap.shape[0] or features.shape[2:] != amap.shape[2:]):
        raise ShapeError("mul_broadcast", features.shape, amap.shape)
    out = features.data * amap.data

    def backward(g):
        df = g * amap.data if _need(features) else None
        dm = (g * features.data).sum(axis=1, keepdims=True) if _need(amap) else None
        return df, dm

    return make_result(out, (features, amap), backward)


def mean_of(tensors):
    """Elementwise mean of equally shaped tensors."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError("mean_of", ref, t.shape)
    k = len(tensors)
    out = sum(t.data for t in tensors[1:]) + tensors[0].data
    out = out / k
    return make_result(out, tuple(tensors), lambda g: tuple(g / k for _ in range(k)))


def flatten(x):
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return make_result(out, (x,), lambda g: (g.reshape(shape),))


def softmax_cross_entropy(logits, target):
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[1] < 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, target.shape)
    n, k = logits.shape
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"softmax_cross_entropy: targets must lie in [0, {k}), got {target.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, target]).mean())

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, target] -= 1.0
        return (p * (g / n),)

    return make_result(loss, (logits,), backward)


def mse_loss(pred, target):
    """Mean squared error; ``pred`` may be N or N×1."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    flat = pred.data.reshape(-1)
    if flat.shape != target.reshape(-1).shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = flat - target.reshape(-1)
    n = diff.size
    loss = np.asarray((diff * diff).mean())

    def backward(g):
        return ((2.0 / n) * g * diff).reshape(pred.shape),

    return make_result(loss, (pred,), backward)


def weighted_sum(terms, weights):
    """Linear combination of scalar tensors."""
    if len(terms) != len(weights):
        raise ValueError("weighted_sum: one weight per term")
    out = np.asarray(sum(float(w) * t.data for w, t in zip(weights, terms)))
    return make_result(out, tuple(terms), lambda g: tuple(float(w) * g for w in weights))


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNormState", "add", "batchnorm2d", "concat_channels",
    "conv2d", "flatten", "fully_connected", "global_avg_pool", "mean_of", "mse_loss",
    "mul_broadcast", "relu", "scale", "sigmoid", "softmax_cross_entropy", "sum_all",
    "take_channel", "weighted_sum",
]

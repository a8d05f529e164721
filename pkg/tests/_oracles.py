"""Independent reference computations used by the test-suite.

Nothing here calls into the code under test except to build the
function whose gradient is being checked.
"""
import numpy as np

from shapefat.engine import ops
from shapefat.engine.tensor import Tensor, backward, make_result


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for ni in range(n):
        for ki in range(k):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0 if b is None else b[ki]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                ii = oi * stride + di - pad
                                jj = oj * stride + dj - pad
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[ni, ci, ii, jj] * w[ki, ci, di, dj]
                    out[ni, ki, oi, oj] = acc
    return out


def fc_loops(x, w, b):
    n, d = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = b[j]
            for t in range(d):
                acc += x[i, t] * w[t, j]
            out[i, j] = acc
    return out


def mul_broadcast_loops(f, m):
    out = np.zeros_like(f)
    n, c, h, w = f.shape
    for a in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = m[a, 0, i, j] * f[a, ch, i, j]
    return out


def cross_entropy_direct(logits, target):
    total = 0.0
    for row, t in zip(logits, target):
        total += -np.log(np.exp(row[t]) / np.exp(row).sum())
    return total / len(target)


def finite_difference(fn, arrays, h=1e-4):
    """Central differences of scalar ``fn(list_of_arrays)`` w.r.t. every input."""
    grads = []
    for idx, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _gradcase_conv(rng):
    n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(kh, 6), rng.integers(kw, 6)
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((k, c, kh, kw)), rng.standard_normal(k)]
    return (lambda t: ops.conv2d(t[0], t[1], t[2], stride=stride, pad=pad)), arrays


def _gradcase_bn(rng):
    n, c, h, w = rng.integers(2, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    arrays = [rng.standard_normal((n, c, h, w)) * 2 + 1, rng.standard_normal(c), rng.standard_normal(c)]
    state = ops.BatchNormState.zeros(c)
    return (lambda t: ops.batchnorm2d(t[0], t[1], t[2], state, train=True)), arrays


def _gradcase_bn_eval(rng):
    c = int(rng.integers(1, 4))
    arrays = [rng.standard_normal((2, c, 3, 3)), rng.standard_normal(c), rng.standard_normal(c)]
    state = ops.BatchNormState(rng.standard_normal(c), rng.uniform(0.5, 2, c), initialized=True)
    return (lambda t: ops.batchnorm2d(t[0], t[1], t[2], state, train=False)), arrays


def _gradcase_relu(rng):
    return (lambda t: ops.relu(t[0])), [_away_from_zero(rng, tuple(rng.integers(1, 5, size=3)))]


def _gradcase_sigmoid(rng):
    return (lambda t: ops.sigmoid(t[0])), [rng.standard_normal(tuple(rng.integers(1, 5, size=2))) * 3]


def _gradcase_gap(rng):
    return (lambda t: ops.global_avg_pool(t[0])), [rng.standard_normal(tuple(rng.integers(1, 4, size=4)))]


def _gradcase_fc(rng):
    n, d, m = rng.integers(1, 5, size=3)
    arrays = [rng.standard_normal((n, d)), rng.standard_normal((d, m)), rng.standard_normal(m)]
    return (lambda t: ops.fully_connected(t[0], t[1], t[2])), arrays


def _gradcase_concat(rng):
    n, h, w = rng.integers(1, 4, size=3)
    arrays = [rng.standard_normal((n, rng.integers(1, 4), h, w)), rng.standard_normal((n, rng.integers(1, 4), h, w))]
    return (lambda t: ops.concat_channels(t[0], t[1])), arrays


def _gradcase_mul(rng):
    n, c, h, w = rng.integers(1, 4, size=4)
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((n, 1, h, w))]
    return (lambda t: ops.mul_broadcast(t[0], t[1])), arrays


def _gradcase_take(rng):
    c = int(rng.integers(2, 5))
    k = int(rng.integers(0, c))
    return (lambda t: ops.take_channel(t[0], k)), [rng.standard_normal((2, c, 3, 2))]


def _gradcase_mean_of(rng):
    shape = tuple(rng.integers(1, 4, size=2))
    k = int(rng.integers(2, 5))
    return (lambda t: ops.mean_of(list(t))), [rng.standard_normal(shape) for _ in range(k)]


def _gradcase_add(rng):
    shape = tuple(rng.integers(1, 4, size=3))
    return (lambda t: ops.add(t[0], t[1])), [rng.standard_normal(shape), rng.standard_normal(shape)]


def _gradcase_flatten(rng):
    return (lambda t: ops.flatten(t[0])), [rng.standard_normal(tuple(rng.integers(1, 4, size=4)))]


def _gradcase_ce(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    target = rng.integers(0, k, size=n)
    return (lambda t: ops.softmax_cross_entropy(t[0], target)), [rng.standard_normal((n, k)) * 2]


def _gradcase_mse(rng):
    n = int(rng.integers(1, 6))
    target = rng.standard_normal(n)
    return (lambda t: ops.mse_loss(t[0], target)), [rng.standard_normal((n, 1))]


def _gradcase_weighted(rng):
    w = rng.uniform(-2, 2, size=3)
    return (lambda t: ops.weighted_sum(list(t), w)), [rng.standard_normal(()) for _ in range(3)]


def _gradcase_scale(rng):
    factor = float(rng.uniform(-3, 3))
    return (lambda t: ops.scale(t[0], factor)), [rng.standard_normal(tuple(rng.integers(1, 4, size=2)))]


def _gradcase_sum(rng):
    return (lambda t: ops.sum_all(t[0])), [rng.standard_normal(tuple(rng.integers(1, 4, size=3)))]


GRADIENT_CASES = {
    "conv2d": _gradcase_conv,
    "batchnorm2d_train": _gradcase_bn,
    "batchnorm2d_eval": _gradcase_bn_eval,
    "relu": _gradcase_relu,
    "sigmoid": _gradcase_sigmoid,
    "global_avg_pool": _gradcase_gap,
    "fully_connected": _gradcase_fc,
    "concat_channels": _gradcase_concat,
    "mul_broadcast": _gradcase_mul,
    "take_channel": _gradcase_take,
    "mean_of": _gradcase_mean_of,
    "add": _gradcase_add,
    "flatten": _gradcase_flatten,
    "softmax_cross_entropy": _gradcase_ce,
    "mse_loss": _gradcase_mse,
    "weighted_sum": _gradcase_weighted,
    "scale": _gradcase_scale,
    "sum_all": _gradcase_sum,
}


def gradient_check(op_name, seed, h=1e-4):
    """Analytic vs central-difference gradient for one random case.

    The op output is contracted against a fixed random tensor so every
    output element contributes. Returns the worst relative error over inputs.
    """
    rng = np.random.default_rng(seed)
    build, arrays = GRADIENT_CASES[op_name](rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = {}

    def scalar(arrs):
        out = build([Tensor(a) for a in arrs]).data
        if "r" not in probe:
            probe["r"] = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return float((out * probe["r"]).sum())

    scalar(arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    loss = _contract(out, Tensor(probe["r"]))
    backward(loss)
    numeric = finite_difference(scalar, arrays, h=h)
    return max(rel_error(t.grad, g) for t, g in zip(tensors, numeric))


def _contract(out, r):
    """sum(out * r) as a recorded op, independent of the ops under test."""
    return make_result(np.asarray((out.data * r.data).sum()), (out,), lambda g: (g * r.data,))


def bilinear_loop(img, n):
    """Scalar pixel-centre bilinear upsampling to n×n, clamped at the borders."""
    h, w = img.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            y = min(max((i + 0.5) * h / n - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / n - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
                         + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])
    return out

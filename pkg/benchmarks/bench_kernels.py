"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 32]

Times im2col, col2im, the batch-norm training kernels and one full training
step of the default network under each available backend, single-threaded.
"""
import argparse
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from shapefat.engine import backward, kernels
from shapefat.model import ModelConfig, build_model, forward, total_loss


def kernel_cases(batch, rng):
    x = rng.random((batch, 16, 32, 32))
    cols = kernels.im2col(x, 3, 3, 1, 1)
    mean, inv = x.mean(axis=(0, 2, 3)), 1 / np.sqrt(x.var(axis=(0, 2, 3)) + 1e-5)
    gamma, beta = np.ones(16), np.zeros(16)
    g = rng.random(x.shape)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "bn forward": lambda: kernels.bn_train_forward(x, gamma, beta, 1e-5),
        "bn backward": lambda: kernels.bn_train_backward(g, xhat, gamma, inv),
    }


def train_step_case(batch, rng):
    mp = build_model(ModelConfig(), seed=0)
    f, l = rng.random((batch, 64, 64)), rng.random((batch, 64, 64))
    fat, grade = rng.random(batch) * 40, rng.integers(0, 4, batch)

    def step():
        loss = total_loss(forward(mp, f, l, train=True), fat, grade)[0]
        backward(loss)
        mp.params.zero_grad()
    return step


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    results = {}
    with threadpool_limits(1):
        for name in kernels.available_backends():
            kernels.use_backend(name)
            rng = np.random.default_rng(0)
            cases = kernel_cases(args.batch, rng)
            cases["train step"] = train_step_case(args.batch, rng)
            for case, fn in cases.items():
                fn()  # warm up
                results[case, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    backends = kernels.available_backends()
    print(f"{'case':14s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for case in dict.fromkeys(c for c, _ in results):
        row = [results[case, b] * 1e3 for b in backends]
        line = f"{case:14s}" + "".join(f"{t:10.2f}ms" for t in row)
        if "compiled" in backends:
            line += f"{results[case, 'python'] / results[case, 'compiled']:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-numpy convolution kernels.

Times the four hot kernels (conv forward, both conv backward passes, and
bilinear sampling) plus one full training step on a batch of 250 images.

Usage: python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import sys
import time

import numpy as np

from protonet import kernels
from protonet import model as M
from protonet.loss import Hyperparams, total_loss


def time_call(fn, repeats):
    fn()  # warm-up (also triggers JIT compilation for the compiled backend)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    x = rng.normal(size=(250, 28, 28, 1))
    k = rng.normal(size=(3, 3, 1, 32))
    xp = np.pad(x, ((0, 0), (0, 1), (0, 1), (0, 0)))
    y = rng.normal(size=(250, 14, 14, 32))
    sy = rng.uniform(0, 27, size=(250, 28, 28))
    sx = rng.uniform(0, 27, size=(250, 28, 28))
    return {
        "conv_forward": lambda: kernels.conv2d_forward(xp, k, 2, 14, 14),
        "conv_backward_input": lambda: kernels.conv2d_backward_input(y, k, 2, 29, 29),
        "conv_backward_kernel": lambda: kernels.conv2d_backward_kernel(xp, y, 3, 3, 2),
        "bilinear_sample": lambda: kernels.bilinear_sample(x, sy, sx),
    }


def train_step_case(rng):
    cfg = M.preset("mnist")
    params = M.init_params(cfg, 0)
    batch = rng.uniform(size=(250, 28, 28, 1))
    labels = rng.integers(0, 10, 250)
    hyper = Hyperparams()

    def step():
        params.zero_grads()
        trace = M.forward(params, cfg, batch)
        _, total = total_loss(trace, batch, labels, params.prototypes, hyper, True)
        total.backward()

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    backends = kernels.available_backends()
    if len(backends) < 2:
        print(f"only {backends} available; nothing to compare", file=sys.stderr)

    rng = np.random.default_rng(0)
    results = {}
    for backend in backends:
        kernels.set_backend(backend)
        row = {name: time_call(fn, args.repeats)
               for name, fn in kernel_cases(rng).items()}
        row["full_train_step"] = time_call(train_step_case(rng), args.repeats)
        results[backend] = row

    names = list(next(iter(results.values())))
    width = max(len(n) for n in names)
    header = f"{'case':<{width}}" + "".join(f"{b:>14}" for b in results)
    print(header)
    print("-" * len(header))
    for name in names:
        line = f"{name:<{width}}"
        for backend in results:
            line += f"{results[backend][name] * 1e3:>12.2f}ms"
        print(line)


if __name__ == "__main__":
    main()

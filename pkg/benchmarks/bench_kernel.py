"""Compare the compiled and numpy loss/gradient backends.

    python benchmarks/bench_kernel.py [--repeat 200] [--epochs 20]

Prints per-call time of the kernel at a few model sizes, the largest
absolute difference between backends, and wall time of short training runs
with each backend swapped in.
"""

from __future__ import annotations

import argparse
import time
import timeit

import numpy as np

from snplab import kernels
from snplab.core import ModelConfig, init_params
from snplab.meta import HyperParams, train_space
from snplab.tasks import SuiteSpec, generate_task_suite, make_rng

SIZES = [
    ("desk (8-32-8)", ModelConfig(8, 8, 8, (32,)), 75),
    ("small (8-16-8)", ModelConfig(8, 8, 8, (16,)), 25),
    ("wide (16-64-64-16)", ModelConfig(16, 16, 16, (64, 64)), 100),
]


def _args(config: ModelConfig, n: int, rng):
    theta = init_params(config, rng)
    X = rng.standard_normal((n, config.input_dim))
    D = rng.standard_normal((5, config.descriptor_dim))
    y = rng.integers(0, 5, n)
    return (theta.values, np.array(config.input_dims, dtype=np.int64),
            np.array(config.descriptor_dims, dtype=np.int64), config.activation == "relu",
            config.temperature, X, y, D)


def bench_calls(repeat: int) -> None:
    backends = kernels.available_backends()
    print(f"{'model':<20} {'samples':>7} " + " ".join(f"{b + ' us':>12}" for b in backends)
          + f" {'speedup':>8} {'max |diff|':>11}")
    for name, config, n in SIZES:
        args = _args(config, n, make_rng(0))
        times, outs = {}, {}
        for b, fn in backends.items():
            outs[b] = fn(*args)
            times[b] = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat * 1e6
        diff = 0.0
        if "cython" in outs:
            diff = max(abs(outs["cython"][0] - outs["python"][0]),
                       float(np.abs(outs["cython"][1] - outs["python"][1]).max()))
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<20} {n:>7} " + " ".join(f"{times[b]:>12.1f}" for b in backends)
              + f" {speed:>8.1f} {diff:>11.2e}")


def bench_training(epochs: int) -> None:
    suite = generate_task_suite(0, SuiteSpec())
    hyper = HyperParams(epochs_train=epochs)
    config = ModelConfig(8, 8, 8, (32,))
    saved = kernels._impl
    try:
        for b, fn in kernels.available_backends().items():
            kernels._impl = fn
            t0 = time.perf_counter()
            train_space(list(suite.seen[:3]), hyper, config, rng_seed=0)
            dt = time.perf_counter() - t0
            print(f"train_space, {epochs} epochs, backend {b:<7}: {dt:6.2f} s ({dt / epochs * 1e3:.1f} ms/epoch)")
    finally:
        kernels._impl = saved


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--epochs", type=int, default=20)
    args = p.parse_args(argv)
    print(f"default backend: {kernels.BACKEND}")
    bench_calls(args.repeat)
    bench_training(args.epochs)


if __name__ == "__main__":
    main()

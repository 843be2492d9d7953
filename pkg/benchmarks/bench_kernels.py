"""Compare the numba kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py

Prints per-call times for the dense kernels at the shapes the simulator uses,
then times a short training run under each backend (the numpy run is a
subprocess with VFLMID_NO_NUMBA=1, since the flag is read at import).
"""
import os
import subprocess
import sys
import timeit

import numpy as np

from vflmid import kernels

SHAPES = [(64, 20, 32), (64, 32, 8), (256, 64, 64), (1000, 16, 4)]

TRAIN = """
import time
from vflmid.data import gen_synthetic
from vflmid.diffcore import Rng
from vflmid.protocol import TrainConfig, run_training
ds = gen_synthetic(2000, 4, 20, 0.25, Rng(0))
run_training(ds, TrainConfig(epochs=1), None, Rng(0))
t = time.perf_counter()
run_training(ds, TrainConfig(epochs=10), None, Rng(0))
print(f"{time.perf_counter() - t:.3f}")
"""


def per_call(fn, *args, number=200) -> float:
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=3)) / number * 1e6


def train_seconds(no_numba: bool) -> float:
    env = dict(os.environ, VFLMID_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    rng = np.random.default_rng(0)
    print(f"numba active: {kernels.USE_NUMBA}")
    print(f"{'kernel':<12}{'shape':<18}{'numba us':>10}{'numpy us':>10}")
    for n, k, m in SHAPES:
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        c = rng.normal(size=(n, m))
        rows = [("matmul", kernels.matmul, kernels.numpy_matmul, (a, b)),
                ("matmul_tn", kernels.matmul_tn, kernels.numpy_matmul_tn, (a, c)),
                ("matmul_nt", kernels.matmul_nt, kernels.numpy_matmul_nt, (c, b))]
        for name, fast, ref, args in rows:
            print(f"{name:<12}{str((n, k, m)):<18}{per_call(fast, *args):>10.1f}{per_call(ref, *args):>10.1f}")
    x = rng.integers(0, 10, 100000)
    y = rng.integers(0, 10, 100000)
    print(f"{'counts':<12}{'(100000, 10x10)':<18}{per_call(kernels.joint_counts, x, y, 10, 10, number=20):>10.1f}"
          f"{per_call(kernels.numpy_joint_counts, x, y, 10, 10, number=20):>10.1f}")
    print(f"10-epoch training: numba {train_seconds(False):.2f}s, numpy {train_seconds(True):.2f}s")


if __name__ == "__main__":
    main()

"""Compare the compiled and NumPy/SciPy surface-distance kernels.

    python3 benchmarks/bench_kernels.py [--shape 240 240 155] [--repeat 3]
"""

import argparse
import time

import numpy as np

from segguided import kernels


def make_pair(shape, seed=0):
    grid = np.indices(shape, dtype=np.float32)
    centre = np.array(shape, dtype=np.float32)[:, None, None, None] / 2
    r = min(shape) / 4
    a = ((grid - centre) ** 2).sum(0) <= r * r
    b = np.roll(a, 3, axis=0) ^ (np.random.default_rng(seed).random(shape) < 0.002)
    return a.astype(np.uint8), b.astype(np.uint8)


def time_backend(mod, a, b, spacing, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        sa, sb = mod.surface(a), mod.surface(b)
        da = mod.squared_edt(sa, spacing)
        db = mod.squared_edt(sb, spacing)
        best = min(best, time.perf_counter() - t)
    return best, (da, db)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--shape", type=int, nargs=3, default=(240, 240, 155))
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    a, b = make_pair(tuple(args.shape))
    spacing = tuple(args.spacing)

    t_py, ref = time_backend(kernels.python_backend, a, b, spacing, args.repeat)
    print(f"python  {t_py:8.3f} s")
    if kernels.compiled_backend is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation`")
        return
    t_cy, got = time_backend(kernels.compiled_backend, a, b, spacing, args.repeat)
    err = max(np.abs(x - y).max() for x, y in zip(ref, got))
    print(f"cython  {t_cy:8.3f} s")
    print(f"speedup {t_py / t_cy:8.2f}x   max |diff| {err:.2e}")


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-Python kernels on P3P and a RANSAC chunk.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import math
import timeit

import numpy as np

from tbsfm import _pykernels
from tbsfm.geometry import random_rotation

try:
    from tbsfm import _ckernels
except ImportError:
    _ckernels = None

INTR = np.array([800.0, 800.0, 512.0, 384.0])


def p3p_inputs(rng, n=200):
    out = []
    for _ in range(n):
        R, c = random_rotation(rng), rng.normal(size=3) * 3
        Xc = rng.uniform([-2, -2, 4], [2, 2, 10], size=(3, 3))
        out.append((Xc / np.linalg.norm(Xc, axis=1)[:, None], Xc @ R + c))
    return out


def ransac_inputs(rng, n=400, outliers=200, samples=256):
    R = random_rotation(rng)
    c = np.array([0.0, 0.0, -10.0])
    Xc = rng.uniform([-3, -3, 6], [3, 3, 14], size=(n, 3))
    X = Xc @ R + c
    px = INTR[:2] * Xc[:, :2] / Xc[:, 2:] + INTR[2:]
    px[:outliers] += rng.uniform(-100, 100, (outliers, 2))
    b = np.column_stack([(px - INTR[2:]) / INTR[:2], np.ones(n)])
    b /= np.linalg.norm(b, axis=1)[:, None]
    S = np.array([rng.choice(n, 4, replace=False) for _ in range(samples)], dtype=np.int64)
    return S, b, px, X


def bench(module, p3p_cases, chunk, repeat):
    def run_p3p():
        for f, X in p3p_cases:
            module.p3p(f, X)

    def run_chunk():
        S, b, px, X = chunk
        # confidence 1 - 1e-300 keeps the adaptive bound above 256, so every sample is evaluated
        done = module.ransac_chunk(S, b, px, X, INTR, 4.0, 0, np.zeros(9), np.zeros(3), 0, 10 ** 6, 10 ** 6,
                                   math.log(1e-300), 15)[1]
        assert done == len(S)

    t_p3p = min(timeit.repeat(run_p3p, number=1, repeat=repeat)) / len(p3p_cases)
    t_chunk = min(timeit.repeat(run_chunk, number=1, repeat=repeat))
    return t_p3p, t_chunk


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    cases, chunk = p3p_inputs(rng), ransac_inputs(rng)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    results = {name: bench(mod, cases, chunk, args.repeat) for name, mod in backends}
    print(f"{'backend':<8} {'p3p [us/call]':>14} {'ransac chunk of 256 [ms]':>26}")
    for name, (t_p3p, t_chunk) in results.items():
        print(f"{name:<8} {t_p3p * 1e6:>14.1f} {t_chunk * 1e3:>26.2f}")
    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        print(f"speedup  {py[0] / cy[0]:>14.1f} {py[1] / cy[1]:>26.1f}")
    else:
        print("compiled kernels not built; only the pure-Python backend was timed")


if __name__ == "__main__":
    main()

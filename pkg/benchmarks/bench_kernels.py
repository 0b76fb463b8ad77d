"""Compare the compiled and numpy 3x3 convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes cover the reference CNN's two conv layers at adaptation batch size
200 and the single-sample case used by SGLD chains on small batches.
"""
import argparse
import timeit

import numpy as np

from tea.kernels import compiled_kernels, python_kernels

SHAPES = [  # (batch, c_in, c_out, size)
    (200, 1, 8, 8),
    (200, 8, 16, 4),
    (1, 8, 16, 4),
    (64, 16, 32, 16),
]


def bench(mod, x, w, b, dout, repeat):
    fwd = min(timeit.repeat(lambda: mod.conv3x3_forward(x, w, b), number=3, repeat=repeat)) / 3
    bwd = min(timeit.repeat(lambda: mod.conv3x3_backward(x, w, dout), number=3, repeat=repeat)) / 3
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    py, cy = python_kernels(), compiled_kernels()
    if cy is None:
        print("compiled extension not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'shape (n,cin,cout,hw)':<24}{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    for n, ci, co, s in SHAPES:
        x = rng.standard_normal((n, ci, s, s)).astype(np.float32)
        w = rng.standard_normal((co, ci, 3, 3)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        dout = rng.standard_normal((n, co, s, s)).astype(np.float32)
        rows = [("numpy", py)] + ([("cython", cy)] if cy is not None else [])
        times = {}
        for name, mod in rows:
            times[name] = bench(mod, x, w, b, dout, args.repeat)
            f, bw = times[name]
            print(f"{str((n, ci, co, s)):<24}{name:<10}{1e3 * f:>12.3f}{1e3 * bw:>13.3f}")
        if cy is not None:
            sf = times["numpy"][0] / times["cython"][0]
            sb = times["numpy"][1] / times["cython"][1]
            print(f"{'':<24}{'speedup':<10}{sf:>11.1f}x{sb:>12.1f}x")


if __name__ == "__main__":
    main()

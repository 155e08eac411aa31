"""Benchmark the compiled kernel core against the numpy fallback.

Shapes mirror the toy training pipeline (backbone conv2d on images, BEV head
conv2d, stereo conv3d aggregation). Run after `python setup.py build_ext
--inplace`:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from roadbev.kernels import _numpy as knp

try:
    from roadbev.kernels import _core as kext
except ImportError:
    kext = None

CASES_2D = [
    ("backbone stage1", (3, 192, 320), (8, 3, 3, 3), 2, 1),
    ("backbone stage2", (8, 96, 160), (16, 8, 3, 3), 2, 1),
    ("bev head reduce", (512, 64, 32), (16, 512, 1, 1), 1, 0),
    ("bev head block", (16, 64, 32), (16, 16, 3, 3), 1, 1),
]

CASES_3D = [
    ("agg conv first", (32, 16, 64, 32), (8, 32, 3, 3, 3), 1, 1),
    ("agg conv mid", (8, 16, 64, 32), (8, 8, 3, 3, 3), 1, 1),
    ("hourglass down", (8, 16, 64, 32), (8, 8, 3, 3, 3), 2, 1),
]


def run_case(fwd, bwd, x, w, stride, pad, repeats=3):
    best_f = best_b = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        y = fwd(x, w, stride, pad)
        best_f = min(best_f, time.perf_counter() - t0)
        gy = np.ones_like(y)
        t0 = time.perf_counter()
        bwd(x, w, gy, stride, pad)
        best_b = min(best_b, time.perf_counter() - t0)
    return best_f, best_b


def main():
    rng = np.random.default_rng(0)
    print(f"{'case':<18} {'dir':<4} {'numpy (ms)':>12} {'ext (ms)':>12} {'ext/numpy':>10}")
    for name, xs, ws, stride, pad in CASES_2D + CASES_3D:
        is3d = len(xs) == 4
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        nf, nb = run_case(knp.conv3d_fwd if is3d else knp.conv2d_fwd,
                          knp.conv3d_bwd if is3d else knp.conv2d_bwd, x, w, stride, pad)
        if kext is not None:
            ef, eb = run_case(kext.conv3d_fwd if is3d else kext.conv2d_fwd,
                              kext.conv3d_bwd if is3d else kext.conv2d_bwd,
                              x, w, stride, pad)
        else:
            ef = eb = float("nan")
        print(f"{name:<18} {'fwd':<4} {nf * 1e3:>12.2f} {ef * 1e3:>12.2f} {ef / nf:>10.2f}")
        print(f"{'':<18} {'bwd':<4} {nb * 1e3:>12.2f} {eb * 1e3:>12.2f} {eb / nb:>10.2f}")
    if kext is None:
        print("\ncompiled core not built; run `python setup.py build_ext --inplace`")


if __name__ == "__main__":
    main()

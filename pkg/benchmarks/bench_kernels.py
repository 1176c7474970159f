"""Benchmark the numba conv kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times forward and both backward kernels at the shapes the trainer and the
occlusion sweep actually hit, reports the speedup, and prints the largest
elementwise deviation between backends (they differ only in float32
summation order).
"""

import argparse
import time

import numpy as np

from nnviz import _kernels as K


CASES = [
    ("train conv1 (16,1,32,32) k3", (16, 1, 8, 32, 32, 3, 1, 1)),
    ("train conv2 (16,8,16,16) k3", (16, 8, 16, 16, 16, 3, 1, 1)),
    ("occlusion batch (64,1,32,32)", (64, 1, 8, 32, 32, 3, 1, 1)),
    ("mil trunk (9,8,8,8) k3", (9, 8, 16, 8, 8, 3, 1, 1)),
]


def bench(fn, args, repeats):
    fn(*args)  # warmup / jit
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba not importable; nothing to compare "
              "(numpy fallback is the only backend)")
        return

    rng = np.random.default_rng(0)
    print(f"active backend: {K.backend_name()}   repeats: {args.repeats}\n")
    header = (f"{'case':34s} {'kernel':8s} {'numpy':>10s} {'numba':>10s} "
              f"{'speedup':>8s} {'max dev':>10s}")
    print(header)
    print("-" * len(header))
    for name, (n, ci, co, h, w, k, stride, pad) in CASES:
        x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
        kern = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        out_np = K.conv2d_forward_np(x, kern, b, stride, pad)
        g = rng.standard_normal(out_np.shape).astype(np.float32)

        rows = [
            ("forward",
             lambda: K.conv2d_forward_np(x, kern, b, stride, pad),
             lambda: K.conv2d_forward_nb(x, kern, b, stride, pad)),
            ("bwd_in",
             lambda: K.conv2d_backward_input_np(g, kern, stride, pad, h, w),
             lambda: K.conv2d_backward_input_nb(g, kern, stride, pad, h, w)),
            ("bwd_k",
             lambda: K.conv2d_backward_kernel_np(g, x, k, k, stride, pad),
             lambda: K.conv2d_backward_kernel_nb(g, x, k, k, stride, pad)),
        ]
        for kind, f_np, f_nb in rows:
            t_np = bench(lambda: f_np(), (), args.repeats)
            t_nb = bench(lambda: f_nb(), (), args.repeats)
            dev = float(np.abs(f_np() - f_nb()).max())
            print(f"{name:34s} {kind:8s} {t_np * 1e3:9.2f}ms "
                  f"{t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x {dev:10.2e}")
        print()


if __name__ == "__main__":
    main()

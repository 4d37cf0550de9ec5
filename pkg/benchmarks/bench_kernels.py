"""Compare the compiled convolution kernels against the numpy fallback.

Runs the three convolution primitives on the shapes the small CNN actually
uses and prints per-call times plus the speedup. The compiled backend is
optional; without it only numpy timings appear.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""

import argparse
import time

import numpy as np

from soupkit.kernels import numpy_backend

try:
    from soupkit.kernels import _convcore
except ImportError:
    _convcore = None


def _time(fn, args, repeats):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, x, w, stride, padding, repeats):
    out = numpy_backend.conv2d_forward(x, w, stride, padding)
    gout = np.ascontiguousarray(np.ones_like(out))
    cases = [
        ("forward", "conv2d_forward", (x, w, stride, padding)),
        ("grad_input", "conv2d_backward_input",
         (gout, w, stride, padding, x.shape[2], x.shape[3])),
        ("grad_weight", "conv2d_backward_weight",
         (gout, x, stride, padding, w.shape[2], w.shape[3])),
    ]
    for label, fn_name, args in cases:
        t_np = _time(getattr(numpy_backend, fn_name), args, repeats)
        row = "%-28s %-12s numpy %8.3f ms" % (name, label, t_np * 1e3)
        if _convcore is not None:
            t_cy = _time(getattr(_convcore, fn_name), args, repeats)
            row += "   compiled %8.3f ms   speedup %5.2fx" % (
                t_cy * 1e3, t_np / t_cy if t_cy > 0 else float("inf"))
        print(row)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.batch
    shapes = [
        ("conv1 %dx1x16x16 -> 8" % n, (n, 1, 16, 16), (8, 1, 3, 3), 1, 1),
        ("conv2 %dx8x8x8 -> 16" % n, (n, 8, 8, 8), (16, 8, 3, 3), 1, 1),
        ("strided %dx8x16x16 -> 16" % n, (n, 8, 16, 16), (16, 8, 3, 3), 2, 1),
    ]
    if _convcore is None:
        print("compiled backend not available; timing numpy only")
    for name, xs, ws, stride, padding in shapes:
        x = rng.standard_normal(xs, dtype=np.float32)
        w = rng.standard_normal(ws, dtype=np.float32)
        bench_case(name, x, w, stride, padding, args.repeats)


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-numpy kernel backends.

Runs forward/backward convolution and max pooling over a few
training-representative shapes and prints per-op timings plus a summary.

Usage: python3 benchmarks/kernel_benchmark.py [--repeats N]
"""
import argparse
import time

import numpy as np

from splitee.kernels import available_backends, get_backend

# (label, batch, cin, size, cout, kernel, stride, padding)
CONV_SHAPES = [
    ("desk 16x16 c8", 64, 8, 16, 8, 3, 1, 1),
    ("desk 8x8 c16", 64, 8, 16, 16, 3, 2, 1),
    ("full 32x32 c64", 32, 64, 32, 64, 3, 1, 1),
    ("full 16x16 c128", 32, 64, 32, 128, 3, 2, 1),
]
POOL_SHAPES = [
    ("pool 32x32 c64", 32, 64, 32, 3, 2, 1),
]


def time_call(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3  # ms


def bench_conv(backend, repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, b, cin, size, cout, k, s, p in CONV_SHAPES:
        x = rng.standard_normal((b, cin, size, size))
        w = rng.standard_normal((cout, cin, k, k))
        out = backend.conv2d_forward(x, w, s, p)
        rows.append((f"conv fwd  {label}",
                     time_call(lambda: backend.conv2d_forward(x, w, s, p), repeats)))
        rows.append((f"conv dx   {label}",
                     time_call(lambda: backend.conv2d_backward_input(w, out, x.shape, s, p),
                               repeats)))
        rows.append((f"conv dw   {label}",
                     time_call(lambda: backend.conv2d_backward_weight(x, out, w.shape, s, p),
                               repeats)))
    for label, b, c, size, k, s, p in POOL_SHAPES:
        x = rng.standard_normal((b, c, size, size))
        out, arg = backend.maxpool_forward(x, k, s, p)
        rows.append((f"pool fwd  {label}",
                     time_call(lambda: backend.maxpool_forward(x, k, s, p), repeats)))
        rows.append((f"pool bwd  {label}",
                     time_call(lambda: backend.maxpool_backward(out, arg, x.shape, k, s, p),
                               repeats)))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()

    backends = available_backends()
    print(f"available backends: {', '.join(backends)}")
    results = {name: dict(bench_conv(get_backend(name), args.repeats)) for name in backends}

    ops = list(next(iter(results.values())))
    width = max(len(op) for op in ops)
    header = f"{'op'.ljust(width)}  " + "  ".join(f"{n:>10}" for n in backends)
    if len(backends) > 1:
        header += f"  {'speedup':>8}"
    print(header)
    totals = {n: 0.0 for n in backends}
    for op in ops:
        cells = []
        for n in backends:
            totals[n] += results[n][op]
            cells.append(f"{results[n][op]:>8.2f}ms")
        line = f"{op.ljust(width)}  " + "  ".join(cells)
        if len(backends) > 1:
            line += f"  {results[backends[0]][op] / results[backends[-1]][op]:>7.2f}x"
        print(line)
    total_line = f"{'total'.ljust(width)}  " + "  ".join(
        f"{totals[n]:>8.2f}ms" for n in backends
    )
    if len(backends) > 1:
        total_line += f"  {totals[backends[0]] / totals[backends[-1]]:>7.2f}x"
    print(total_line)


if __name__ == "__main__":
    main()

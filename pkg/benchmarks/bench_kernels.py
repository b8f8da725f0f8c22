"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--n 4000]

Prints one line per (kernel, backend) with the best wall time and the
speed-up of each backend over the python one.
"""
import argparse
import time

import numpy as np

from pas import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n, rng):
    values = np.ascontiguousarray(rng.random((n, 3)))
    order = np.ascontiguousarray(np.lexsort((-values[:, 2], -values[:, 1], -values[:, 0])), dtype=np.int64)
    m = 4 * n
    src = np.ascontiguousarray(rng.integers(0, 25 * n, m), dtype=np.int64)
    dst = np.ascontiguousarray(rng.integers(0, 25 * n, m), dtype=np.int64)
    sims = np.ascontiguousarray(rng.standard_normal((256, 5 * n)))
    rank = np.ascontiguousarray(rng.permutation(5 * n), dtype=np.int64)
    exclude = np.full(256, -1, dtype=np.int64)
    return {
        "front_ranks": lambda impl: impl.front_ranks(values, order),
        "component_labels": lambda impl: impl.component_labels(25 * n, src, dst),
        "select_topk": lambda impl: impl.select_topk(sims, rank, 64, exclude),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4000, help="problem size")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(kernels.BACKENDS))}")
    for name, run in cases(args.n, rng).items():
        base = best_of(lambda: run(kernels.BACKENDS["python"]), args.repeat)
        for backend, impl in sorted(kernels.BACKENDS.items()):
            t = base if backend == "python" else best_of(lambda: run(impl), args.repeat)
            print(f"{name:17s} {backend:7s} {t * 1e3:10.2f} ms  x{base / t:6.1f}")


if __name__ == "__main__":
    main()
